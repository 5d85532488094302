import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from latent_eval.latentnoise import (
    NoiseBudget, decay_factor, decayed, g_inverse_log, g_transform, g_transform_log,
    likelihood_constants, log_likelihood, sample_noisy, sample_noisy_batch, scaled_norm,
)


def test_decay_factor_examples():
    assert decay_factor(0.0) == 0.0
    assert decay_factor(0.5) == pytest.approx(0.1056, abs=1e-3)
    assert decay_factor(1.0) == pytest.approx(0.2929, abs=1e-3)


def test_decay_factor_rejects_negative():
    with pytest.raises(ValueError):
        decay_factor(-0.1)


@settings(max_examples=100)
@given(st.floats(0, 1e3), st.floats(0, 1e3))
def test_decay_factor_monotone_and_bounded(a, b):
    lo, hi = sorted((a, b))
    assert 0.0 <= decay_factor(lo) <= decay_factor(hi) < 1.0


def test_decayed_is_mean_of_samples(rng):
    l = rng.standard_normal(6) * 2
    draws = sample_noisy_batch(l, 0.7, 200000, rng)
    np.testing.assert_allclose(draws.mean(axis=0), decayed(l, 0.7), atol=0.01)


def test_zero_epsilon_is_identity(rng):
    l = rng.standard_normal(4)
    np.testing.assert_array_equal(sample_noisy(l, 0.0, rng), l)
    np.testing.assert_array_equal(sample_noisy_batch(l, 0.0, 3, rng), np.tile(l, (3, 1)))


def test_single_and_batch_sampling_agree_in_distribution(rng):
    l = np.array([1.0, -0.5])
    single = np.array([sample_noisy(l, 1.5, rng) for _ in range(5000)])
    batch = sample_noisy_batch(l, 1.5, 5000, rng)
    for d in range(2):
        assert stats.ks_2samp(single[:, d], batch[:, d]).pvalue > 1e-3


@pytest.mark.parametrize("epsilon", [0.25, 1.0, 4.0])
def test_noise_preserves_standard_normal_prior(epsilon, rng):
    l = rng.standard_normal((50000, 3))
    noisy = (l + epsilon * rng.standard_normal(l.shape)) / math.sqrt(1 + epsilon ** 2)
    for d in range(3):
        assert stats.kstest(noisy[:, d], "norm").pvalue > 1e-3


def test_likelihood_constants_positive():
    for eps in (0.01, 0.5, 1.0, 50.0):
        c1, c2 = likelihood_constants(eps, 7)
        assert c2 > 0
        assert math.isfinite(c1)


def test_likelihood_rejects_zero_epsilon():
    with pytest.raises(ValueError):
        likelihood_constants(0.0, 3)


def test_log_likelihood_matches_gaussian_density(rng):
    for _ in range(100):
        n = int(rng.integers(1, 10))
        eps = float(rng.uniform(0.05, 5.0))
        dl = rng.standard_normal(n)
        # the perturbation is dl = l' - decayed(l); its std is eps / sqrt(1 + eps^2)
        sd = eps / math.sqrt(1 + eps * eps)
        oracle = stats.norm.logpdf(dl, scale=sd).sum()
        assert log_likelihood(dl, eps) == pytest.approx(oracle, rel=1e-12, abs=1e-10)


def test_log_likelihood_peaks_at_zero(rng):
    for _ in range(20):
        dl = rng.standard_normal(5)
        assert log_likelihood(dl, 0.8) < log_likelihood(np.zeros(5), 0.8)


def test_g_transform_round_trip(rng):
    for _ in range(200):
        n = int(rng.integers(1, 20))
        eps = float(rng.uniform(0.05, 5.0))
        rho = float(rng.uniform(0, 3))
        log_tau = g_inverse_log(rho, eps, n)
        assert g_transform_log(log_tau, eps, n) == pytest.approx(rho, rel=1e-9, abs=1e-9)


def test_g_transform_boundary_is_the_likelihood_level(rng):
    eps, n = 0.6, 5
    log_tau = g_inverse_log(1.1, eps, n)
    dl = rng.standard_normal(n)
    dl *= 1.1 * math.sqrt(n) / np.linalg.norm(dl)
    assert scaled_norm(dl) == pytest.approx(1.1)
    assert log_likelihood(dl, eps) == pytest.approx(log_tau, abs=1e-10)


def test_g_transform_decreasing_and_zero_at_peak():
    eps, n = 1.0, 4
    c1, _ = likelihood_constants(eps, n)
    assert g_transform(math.exp(c1), eps, n) == pytest.approx(0.0, abs=1e-6)
    taus = np.exp(c1 - np.array([0.5, 1.0, 3.0, 10.0]))
    radii = [g_transform(t, eps, n) for t in taus]
    assert all(a < b for a, b in zip(radii, radii[1:]))


def test_g_transform_rejects_unattainable_threshold():
    c1, _ = likelihood_constants(1.0, 4)
    with pytest.raises(ValueError):
        g_transform_log(c1 + 1.0, 1.0, 4)
    with pytest.raises(ValueError):
        g_transform(0.0, 1.0, 4)


def test_scaled_norm():
    assert scaled_norm([3.0, 4.0]) == pytest.approx(5 / math.sqrt(2))
    assert scaled_norm(np.ones(9)) == pytest.approx(1.0)


def test_noise_budget_constructors():
    b = NoiseBudget.from_rho(0.5, 0.8, 6)
    assert b.decay == pytest.approx(decay_factor(0.5))
    back = NoiseBudget.from_tau(0.5, math.exp(b.log_tau), 6)
    assert back.rho == pytest.approx(0.8)
    with pytest.raises(ValueError):
        NoiseBudget(0.5, 0.3, 6, log_tau=b.log_tau)
    with pytest.raises(ValueError):
        NoiseBudget(0.5, -1.0, 6)
