import math

import numpy as np
import pytest
from scipy import stats

from latent_eval.attack import AttackConfig, pgd_min_norm
from latent_eval.metrics import (
    MetricEstimate, adversarial_severity, bernoulli_estimate, clean_accuracy, correlations,
    encode_dataset, laga, lags, lara, lars, lga, llar_threshold_check, llna, lra, mean_llna,
    noise_accuracy, severity_estimate, wilson_interval,
)
from latent_eval.models import Encoding, FeedForwardClassifier, GenerativePair, IdentityDecoder
from latent_eval.training import Dataset, sample_dataset
from worlds import constant_classifier, marked_pairs, oracle_classifier, two_class_linear, wrong_classifier

PRIOR = (0.2, 0.3, 0.5)


@pytest.fixture(scope="module")
def world():
    pairs = marked_pairs()
    data = sample_dataset(pairs, PRIOR, 60, np.random.default_rng(1))
    encodings = encode_dataset(pairs, data, np.random.default_rng(2))
    return pairs, data, encodings


def exact_encodings(data):
    return [Encoding(l, 0.0, (0.0,), ()) for l in data.latents]


def test_estimator_arithmetic():
    est = bernoulli_estimate("LGA", [1] * 7 + [0] * 3)
    assert est.value == 0.7 and est.k == 10
    assert est.ci_low <= 0.7 <= est.ci_high


def test_wilson_interval_matches_reference():
    lo, hi = wilson_interval(30, 100)
    ref = stats.binomtest(30, 100).proportion_ci(0.95, method="wilson")
    assert lo == pytest.approx(ref.low, abs=1e-12)
    assert hi == pytest.approx(ref.high, abs=1e-12)
    assert wilson_interval(0, 50)[0] == 0.0
    assert wilson_interval(50, 50)[1] == pytest.approx(1.0)


def test_severity_estimate_excludes_failures():
    est = severity_estimate("LAGS", [0.5, 1.5, math.inf, 1.0])
    assert est.value == pytest.approx(1.0)
    assert est.k == 3 and est.failures == 1
    assert est.ci_low <= 1.0 <= est.ci_high


def test_metric_estimate_round_trip():
    est = severity_estimate("LAGS", [math.inf], [{"rho_hat": math.inf}])
    data = est.to_dict()
    assert data["value"] is None and "records" not in data
    back = MetricEstimate.from_dict(data)
    assert math.isnan(back.value) and back.failures == 1


def test_lga_oracle_is_exactly_one(rng):
    pairs = marked_pairs()
    assert lga(oracle_classifier(3, 10), pairs, PRIOR, 500, rng).value == 1.0


def test_lga_constant_classifier_two_classes(rng):
    pairs = marked_pairs(n_classes=2)
    est = lga(constant_classifier(2, 10, 1), pairs, (0.5, 0.5), 10000, rng)
    assert 0.48 <= est.value <= 0.52


def test_lga_wrong_classifier_is_zero(rng):
    assert lga(wrong_classifier(3, 10), marked_pairs(), PRIOR, 500, rng).value == 0.0


def test_lga_rejects_bad_input(rng):
    with pytest.raises(ValueError):
        lga(oracle_classifier(3, 10), marked_pairs(), PRIOR, 0, rng)
    with pytest.raises(ValueError):
        lga(oracle_classifier(3, 10), marked_pairs(), (0.5, 0.5, 0.1), 10, rng)


def test_encodings_reconstruct_the_world(world):
    pairs, data, encodings = world
    assert max(e.residual for e in encodings) < 1e-6


def test_lra_rigged_classifiers(world, rng):
    pairs, data, encodings = world
    assert lra(oracle_classifier(3, 10), pairs, data, rng, encodings).value == 1.0
    assert lra(wrong_classifier(3, 10), pairs, data, rng, encodings).value == 0.0
    est = lra(oracle_classifier(3, 10), pairs, data, rng, encodings)
    assert est.flagged == 0


def test_lra_matches_direct_loop(rng):
    pairs = marked_pairs(marker_gain=2.0, seed=4)
    clf = FeedForwardClassifier.mlp([10, 12, 3], rng)
    data = sample_dataset(pairs, PRIOR, 200, rng)
    encodings = exact_encodings(data)
    direct = np.mean([clf.classify(pairs[y].decode(l)) == y for l, y in zip(data.latents, data.labels)])
    assert lra(clf, pairs, data, rng, encodings).value == direct


def test_lra_flags_bad_reconstructions(world, rng):
    pairs, data, _ = world
    bad = [Encoding(l, 1.0, (1.0,), ()) for l in data.latents]
    assert lra(oracle_classifier(3, 10), pairs, data, rng, bad).flagged == len(data)


def test_lra_rejects_empty_dataset(rng):
    empty = Dataset(np.zeros((0, 10)), np.zeros(0, dtype=int))
    with pytest.raises(ValueError):
        lra(oracle_classifier(3, 10), marked_pairs(), empty, rng)


def test_llna_zero_noise_is_reconstruction_correctness(rng):
    pairs = marked_pairs(marker_gain=2.0, seed=4)
    clf = FeedForwardClassifier.mlp([10, 12, 3], rng)
    for _ in range(10):
        l = rng.standard_normal(4)
        enc = Encoding(l, 0.0, (0.0,), ())
        est = llna(clf, pairs[1], pairs[1].decode(l), 1, 0.0, 20, rng, encoding=enc)
        assert est.value == float(clf.classify(pairs[1].decode(l)) == 1)


def test_llna_oracle_is_one_for_any_noise(world, rng):
    pairs, data, encodings = world
    for eps in (0.1, 1.0, 10.0):
        est = llna(oracle_classifier(3, 10), pairs[2], data.xs[0], 2, eps, 200, rng, encoding=encodings[0])
        assert est.value == 1.0


def test_llna_small_sample_within_large_sample_interval():
    pairs = marked_pairs(marker_gain=2.0, seed=4)
    clf = FeedForwardClassifier.mlp([10, 12, 3], np.random.default_rng(9))
    l = np.full(4, 0.3)
    enc = Encoding(l, 0.0, (0.0,), ())
    small = llna(clf, pairs[0], pairs[0].decode(l), 0, 1.0, 200, np.random.default_rng(5), encoding=enc)
    again = llna(clf, pairs[0], pairs[0].decode(l), 0, 1.0, 200, np.random.default_rng(5), encoding=enc)
    big = llna(clf, pairs[0], pairs[0].decode(l), 0, 1.0, 100000, np.random.default_rng(6), encoding=enc)
    assert small.value == again.value
    assert small.ci_low <= big.value <= small.ci_high


def test_mean_llna_bounds(world, rng):
    pairs, data, encodings = world
    est = mean_llna(oracle_classifier(3, 10), pairs, data.head(10), 0.5, 20, rng, encodings[:10])
    assert est.value == 1.0 and 0.0 <= est.ci_low <= 1.0


def linear_latent_world(rng, n=4):
    w = rng.standard_normal(n)
    return two_class_linear(w, 1.5), (GenerativePair(IdentityDecoder(0, n)),), w


def test_llar_threshold_check_analytic(rng):
    clf, (pair,), w = linear_latent_world(rng)
    l0 = np.zeros(4)
    rho_star = 1.5 / (np.linalg.norm(w) * 2.0)
    assert llar_threshold_check(clf, pair, 0, l0, 0.5, 1e-6, rng=rng)
    assert llar_threshold_check(clf, pair, 0, l0, 0.5, 0.9 * rho_star, rng=rng)
    assert not llar_threshold_check(clf, pair, 0, l0, 0.5, 1.1 * rho_star, rng=rng)


def test_laga_large_rho_weak_classifier_is_near_zero(rng):
    pairs = marked_pairs(marker_gain=2.0, seed=4)
    clf = FeedForwardClassifier.mlp([10, 12, 3], rng)
    est = laga(clf, pairs, PRIOR, 0.5, 2.5, 20, AttackConfig(restarts=3), rng)
    assert est.value <= 0.1


def test_laga_oracle_on_separated_world_is_one(rng):
    pairs = marked_pairs(marker_gain=0.0)
    est = laga(oracle_classifier(3, 10), pairs, PRIOR, 0.5, 0.5, 20, AttackConfig(restarts=2), rng)
    assert est.value == 1.0


def test_laga_and_lara_non_increasing_in_rho(world):
    pairs = marked_pairs(marker_gain=2.0, seed=4)
    clf = FeedForwardClassifier.mlp([10, 12, 3], np.random.default_rng(3))
    rhos = [0.05, 0.2, 0.5, 1.0, 2.0]
    cfg = AttackConfig(restarts=2)
    vals = [e.value for e in laga(clf, pairs, PRIOR, 0.5, rhos, 30, cfg, np.random.default_rng(8))]
    assert vals == sorted(vals, reverse=True)
    data = sample_dataset(pairs, PRIOR, 30, np.random.default_rng(2))
    vals = [e.value for e in lara(clf, pairs, data, 1.0, rhos, cfg, np.random.default_rng(8),
                                  exact_encodings(data))]
    assert vals == sorted(vals, reverse=True)


def test_lags_linear_world_matches_analytic_mean():
    clf, pairs, w = linear_latent_world(np.random.default_rng(0))
    est = lags(clf, pairs, (1.0,), 0.5, 30, rng=np.random.default_rng(1))
    # replay the estimator's draws: one label draw, then the latents
    replay = np.random.default_rng(1)
    replay.choice(1, size=30, p=[1.0])
    l1 = replay.standard_normal((30, 4)) / math.sqrt(1.25)
    z = l1 @ w + 1.5
    analytic = np.where(z > 0, z / (np.linalg.norm(w) * 2.0), 0.0)
    assert est.failures == 0
    assert est.value == pytest.approx(analytic.mean(), rel=0.05)
    assert est.value == pytest.approx(np.mean([r["rho_hat"] for r in est.records]))


def test_lags_all_misclassified_is_zero(rng):
    pairs = marked_pairs()
    est = lags(wrong_classifier(3, 10), pairs, PRIOR, 0.5, 10, rng=rng)
    assert est.value == 0.0


def test_lars_records_and_linear_oracle(rng):
    clf, pairs, w = linear_latent_world(rng)
    latents = rng.standard_normal((25, 4)) * 0.3
    data = Dataset(latents.copy(), np.zeros(25, dtype=int), latents)
    est = lars(clf, pairs, data, 1.0, rng=rng, encodings=exact_encodings(data))
    l1 = latents / math.sqrt(2.0)
    z = l1 @ w + 1.5
    analytic = np.where(z > 0, z / (np.linalg.norm(w) * 2.0), 0.0)
    assert est.value == pytest.approx(analytic.mean(), rel=0.05)
    keys = {"rho_hat", "perturbed_latent_scaled_norm", "dx_l1", "dx_l2", "success", "sample_id", "epsilon"}
    assert all(set(r) == keys for r in est.records)


def test_more_restarts_never_increase_rho_hat(rng):
    pairs = marked_pairs(marker_gain=2.0, seed=4)
    clf = FeedForwardClassifier.mlp([10, 12, 3], rng)
    for _ in range(5):
        l = rng.standard_normal(4)
        i = clf.classify(pairs[0].decode(l))
        few = pgd_min_norm(clf, pairs[0], i, l, AttackConfig(restarts=3, seed=11))
        many = pgd_min_norm(clf, pairs[0], i, l, AttackConfig(restarts=12, seed=11))
        assert many.rho_hat <= few.rho_hat


def test_clean_and_noise_accuracy(world, rng):
    pairs, data, _ = world
    clf = oracle_classifier(3, 10)
    assert clean_accuracy(clf, data).value == 1.0
    assert noise_accuracy(clf, data, 0.0, rng).value == clean_accuracy(clf, data).value
    # margins of about 2 * tanh(3) dwarf sigma = 0.05
    assert noise_accuracy(clf, data, 0.05, rng).value == 1.0
    assert noise_accuracy(wrong_classifier(3, 10), data, 0.3, rng).value == 0.0
    with pytest.raises(ValueError):
        noise_accuracy(clf, data, -1.0, rng)


def test_adversarial_severity_linear(rng):
    w = rng.standard_normal(6)
    clf = two_class_linear(w, 1.0)
    xs = rng.standard_normal((20, 6)) * 0.2
    labels = clf.classify_batch(xs)
    data = Dataset(xs, labels)
    z = np.abs(xs @ w + 1.0)
    l2 = adversarial_severity(clf, data, "l2_scaled", rng=rng)
    assert l2.name == "adversarial_severity_l2"
    assert l2.value == pytest.approx(np.mean(z / (np.linalg.norm(w) * math.sqrt(6))), rel=0.05)
    linf = adversarial_severity(clf, data, "linf_scaled", rng=rng)
    assert linf.value == pytest.approx(np.mean(z / (np.abs(w).sum() * 6)), rel=0.05)
    # ||dx||_inf <= ||dx||_2 on the same perturbations
    assert all(r["dx_linf"] <= r["dx_l2"] + 1e-15 for r in l2.records)


def test_adversarial_severity_misclassified_contribute_zero(rng):
    clf = constant_classifier(3, 10, 0)
    data = Dataset(rng.standard_normal((5, 10)), np.ones(5, dtype=int))
    assert adversarial_severity(clf, data, rng=rng).value == 0.0


def test_estimates_independent_of_jobs(world):
    pairs = marked_pairs(marker_gain=2.0, seed=4)
    clf = FeedForwardClassifier.mlp([10, 12, 3], np.random.default_rng(3))
    cfg = AttackConfig(restarts=2)
    a = lags(clf, pairs, PRIOR, 0.5, 6, cfg, np.random.default_rng(4), jobs=1)
    b = lags(clf, pairs, PRIOR, 0.5, 6, cfg, np.random.default_rng(4), jobs=2)
    assert a.to_dict(True) == b.to_dict(True)


def test_correlations_examples(rng):
    a = rng.standard_normal(20)
    same = correlations(a, a)
    assert same.pearson == pytest.approx(1.0) and same.spearman == pytest.approx(1.0)
    assert correlations([1, 2, 3, 4], [9, 7, 5, 0]).spearman == pytest.approx(-1.0)
    const = correlations([1, 1, 1], [1, 2, 3])
    assert not const.defined and math.isnan(const.pearson)
    with pytest.raises(ValueError):
        correlations([1, 2], [1, 2])


def test_correlations_match_definitions(rng):
    a, b = rng.standard_normal(20), rng.standard_normal(20)
    da, db = a - a.mean(), b - b.mean()
    pearson = (da @ db) / math.sqrt((da @ da) * (db @ db))
    ra, rb = stats.rankdata(a), stats.rankdata(b)
    ra, rb = ra - ra.mean(), rb - rb.mean()
    spearman = (ra @ rb) / math.sqrt((ra @ ra) * (rb @ rb))
    c = correlations(a, b)
    assert c.pearson == pytest.approx(pearson, abs=1e-12)
    assert c.spearman == pytest.approx(spearman, abs=1e-12)
