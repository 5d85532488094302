import numpy as np
import pytest

from latent_eval import ndiff
from latent_eval.models import (
    FeedForwardClassifier, GenerativePair, GroundTruthDecoder, InversionConfig, Layer,
    ModelFormatError, ModelVersionError, classify_scores, dumps_model, encode, load_model,
    loads_model, save_model,
)
from latent_eval.ndiff import DimensionError


def random_pair(rng, n_in=16, n_lat=4, cls=0, bias_scale=0.5):
    a = rng.standard_normal((n_in, n_lat)) / np.sqrt(n_lat)
    return GenerativePair(GroundTruthDecoder(cls, a, rng.standard_normal(n_in) * bias_scale))


def plain_scores(clf, x):
    h = np.asarray(x, float)
    for layer in clf.layers:
        h = layer.weight @ h + layer.bias
        if layer.activation == "relu":
            h = np.where(h > 0, h, 0.0)
        elif layer.activation == "tanh":
            h = np.tanh(h)
    return h


def test_identity_layer_scores():
    clf = FeedForwardClassifier((Layer(np.eye(2), np.zeros(2), "linear"),))
    np.testing.assert_array_equal(clf.scores([1.0, -2.0]), [1.0, -2.0])


def test_zero_weight_net_scores_zero(rng):
    layers = (Layer(np.zeros((5, 3)), np.zeros(5)), Layer(np.zeros((4, 5)), np.zeros(4), "linear"))
    clf = FeedForwardClassifier(layers)
    np.testing.assert_array_equal(clf.scores(rng.standard_normal(3)), np.zeros(4))


def test_scores_match_plain_evaluation(rng):
    clf = FeedForwardClassifier.mlp([6, 10, 8, 3], rng)
    for _ in range(20):
        x = rng.standard_normal(6)
        np.testing.assert_allclose(clf.scores(x), plain_scores(clf, x), rtol=1e-13, atol=1e-13)
        np.testing.assert_allclose(ndiff.forward(clf.expr(ndiff.Variable(6)), x), clf.scores(x),
                                   rtol=1e-13, atol=1e-13)


def test_classify_picks_max_and_breaks_ties_low():
    assert classify_scores([0.2, 0.9]) == 1
    assert classify_scores([0.5, 0.5]) == 0


def test_classify_matches_argmax(rng):
    clf = FeedForwardClassifier.mlp([5, 7, 4], rng)
    xs = rng.standard_normal((1000, 5))
    brute = [max(range(4), key=lambda j, s=clf.scores(x): (s[j], -j)) for x in xs]
    np.testing.assert_array_equal(clf.classify_batch(xs), brute)
    assert [clf.classify(x) for x in xs[:50]] == brute[:50]


def test_classify_invariant_to_common_score_shift(rng):
    clf = FeedForwardClassifier.mlp([5, 7, 4], rng)
    last = clf.layers[-1]
    shifted = FeedForwardClassifier(clf.layers[:-1] + (Layer(last.weight, last.bias + 3.7, "linear"),))
    xs = rng.standard_normal((500, 5))
    np.testing.assert_array_equal(clf.classify_batch(xs), shifted.classify_batch(xs))


def test_classifier_validation():
    with pytest.raises(DimensionError):
        FeedForwardClassifier((Layer(np.ones((3, 2)), np.zeros(3)), Layer(np.ones((2, 4)), np.zeros(2))))
    with pytest.raises(ValueError):
        FeedForwardClassifier((Layer(np.ones((1, 2)), np.zeros(1), "linear"),))
    clf = FeedForwardClassifier((Layer(np.eye(2), np.zeros(2), "linear"),))
    with pytest.raises(DimensionError):
        clf.scores([1.0, 2.0, 3.0])


def test_decode_zero_latent_zero_bias():
    dec = GroundTruthDecoder(0, np.ones((5, 2)), np.zeros(5))
    np.testing.assert_array_equal(dec.decode([0.0, 0.0]), np.zeros(5))


def test_decode_zero_matrix_returns_tanh_bias(rng):
    b = rng.standard_normal(6)
    dec = GroundTruthDecoder(0, np.zeros((6, 3)), b)
    np.testing.assert_array_equal(dec.decode(rng.standard_normal(3)), np.tanh(b))


def test_decode_formula_and_range(rng):
    pair = random_pair(rng)
    for _ in range(20):
        l = rng.standard_normal(4) * 3
        x = pair.decode(l)
        np.testing.assert_allclose(x, np.tanh(pair.decoder.A @ l + pair.decoder.b), rtol=0, atol=0)
        assert np.all(np.abs(x) <= 1)
    with pytest.raises(DimensionError):
        pair.decode(np.zeros(3))


def test_decoder_needs_fewer_latents_than_outputs():
    with pytest.raises(DimensionError):
        GroundTruthDecoder(0, np.ones((3, 3)), np.zeros(3))


def test_decode_is_coordinatewise_lipschitz(rng):
    pair = random_pair(rng)
    A = pair.decoder.A
    for _ in range(200):
        l, l2 = rng.standard_normal(4), rng.standard_normal(4)
        gap = np.abs(pair.decode(l) - pair.decode(l2))
        assert np.all(gap <= np.abs(A @ (l - l2)) + 1e-15)


def test_encode_round_trip(rng):
    for cls in range(3):
        pair = random_pair(rng, n_in=24, n_lat=6, cls=cls)
        for _ in range(50):
            l_true = rng.standard_normal(6)
            enc = encode(pair, pair.decode(l_true), rng)
            assert enc.residual < 1e-6
            assert np.linalg.norm(enc.latent - l_true) / np.linalg.norm(l_true) < 1e-3


def test_encode_of_tanh_bias_is_zero_latent(rng):
    pair = random_pair(rng)
    enc = pair.encode(np.tanh(pair.decoder.b), rng)
    assert enc.residual < 1e-8
    np.testing.assert_allclose(enc.latent, 0.0, atol=1e-8)


def test_encode_off_manifold_reports_best_restart(rng):
    pair = random_pair(rng)
    x = np.clip(rng.standard_normal(16), -0.99, 0.99)
    enc = encode(pair, x, rng)
    assert enc.residual == pytest.approx(min(enc.restart_residuals))
    assert enc.residual > 1e-3
    assert np.linalg.norm(pair.decode(enc.latent) - x) == pytest.approx(enc.residual, rel=1e-9)
    assert all(b <= a for a, b in zip(enc.trace, enc.trace[1:]))


def test_encode_restart_count(rng):
    pair = GenerativePair(random_pair(rng).decoder, InversionConfig(restarts=2, steps=3))
    enc = encode(pair, np.zeros(16) + 0.9, rng)
    assert len(enc.restart_residuals) == 2


def test_classifier_round_trip(tmp_path, rng):
    clf = FeedForwardClassifier.mlp([8, 12, 12, 3], rng)
    path = tmp_path / "clf.bin"
    save_model(clf, path)
    back = load_model(path)
    for a, b in zip(clf.layers, back.layers):
        assert a.weight.tobytes() == b.weight.tobytes()
        assert a.bias.tobytes() == b.bias.tobytes()
        assert a.activation == b.activation
    xs = rng.standard_normal((100, 8))
    assert clf.scores_batch(xs).tobytes() == back.scores_batch(xs).tobytes()


def test_pair_round_trip(rng):
    pair = GenerativePair(random_pair(rng, cls=2).decoder, InversionConfig(3, 100, 0.5, 1e-7))
    back = loads_model(dumps_model(pair))
    assert back.inversion == pair.inversion
    assert back.class_index == 2
    assert back.decoder.A.tobytes() == pair.decoder.A.tobytes()
    assert back.decoder.b.tobytes() == pair.decoder.b.tobytes()


def test_empty_file_is_parse_error():
    with pytest.raises(ModelFormatError) as info:
        loads_model(b"")
    assert info.value.offset == 0


def test_wrong_magic_is_version_error(rng):
    data = bytearray(dumps_model(FeedForwardClassifier.mlp([3, 2], rng)))
    data[0:8] = b"NOTMODEL"
    with pytest.raises(ModelVersionError):
        loads_model(bytes(data))


def test_future_version_is_version_error(rng):
    data = bytearray(dumps_model(FeedForwardClassifier.mlp([3, 2], rng)))
    data[8] = 99
    with pytest.raises(ModelVersionError):
        loads_model(bytes(data))


def test_truncated_file_reports_offset(rng):
    data = dumps_model(FeedForwardClassifier.mlp([3, 4, 2], rng))
    with pytest.raises(ModelFormatError) as info:
        loads_model(data[:-5])
    assert 0 < info.value.offset < len(data)
    with pytest.raises(ModelFormatError):
        loads_model(data + b"\x00")
