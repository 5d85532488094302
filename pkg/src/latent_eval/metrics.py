"""Sampling estimators for latent-space and conventional performance metrics.

Accuracy-type metrics are Bernoulli means reported with a Wilson interval;
severities are means of per-sample minimum norms with a t interval.  Every
attack-based estimator gives sample ``j`` its own random stream spawned from
the caller's generator, so results do not depend on ``jobs``.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .attack import AttackConfig, pgd_bounded_nested, pgd_min_norm, pgd_original_space
from .latentnoise import decayed, sample_noisy_batch, scaled_norm
from .models import Encoding, FeedForwardClassifier, GenerativePair, encode
from .training import Dataset, validate_prior

CONFIDENCE = 0.95


@dataclass
class MetricEstimate:
    name: str
    value: float
    k: int
    ci_low: float
    ci_high: float
    kind: str = "accuracy"
    params: dict[str, Any] = field(default_factory=dict)
    failures: int = 0
    flagged: int = 0
    records: list[dict[str, Any]] = field(default_factory=list, repr=False)

    def to_dict(self, with_records: bool = False) -> dict[str, Any]:
        out = asdict(self)
        if not with_records:
            out.pop("records")
        for key in ("value", "ci_low", "ci_high"):
            if not math.isfinite(out[key]):
                out[key] = None
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "MetricEstimate":
        data = dict(data)
        for key in ("value", "ci_low", "ci_high"):
            if data.get(key) is None:
                data[key] = math.nan
        return cls(**data)


def wilson_interval(successes: int, n: int, level: float = CONFIDENCE) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    z = stats.norm.ppf(0.5 + level / 2)
    p = successes / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    # the bounds are exact at the edges; avoid rounding residue there
    lo = 0.0 if successes == 0 else max(0.0, centre - half)
    hi = 1.0 if successes == n else min(1.0, centre + half)
    return lo, hi


def bernoulli_estimate(name: str, outcomes, **params) -> MetricEstimate:
    outcomes = np.asarray(outcomes, dtype=bool)
    n = int(outcomes.size)
    hits = int(outcomes.sum())
    value = hits / n if n else math.nan
    lo, hi = wilson_interval(hits, n)
    return MetricEstimate(name, value, n, lo, hi, "accuracy", params)


def severity_estimate(name: str, values: Sequence[float], records=None, **params) -> MetricEstimate:
    """Mean of the finite ``values``; infinite ones (failed searches) are counted, not averaged."""
    vals = np.asarray(values, dtype=np.float64)
    finite = vals[np.isfinite(vals)]
    n = int(finite.size)
    failures = int(vals.size - n)
    if n == 0:
        mean = lo = hi = math.nan
    else:
        mean = math.fsum(finite) / n
        if n > 1:
            sd = float(np.std(finite, ddof=1))
            half = stats.t.ppf(0.5 + CONFIDENCE / 2, n - 1) * sd / math.sqrt(n)
        else:
            half = 0.0
        lo, hi = mean - half, mean + half
    return MetricEstimate(name, mean, n, lo, hi, "severity", params, failures=failures,
                          records=list(records or []))


def _streams(rng: np.random.Generator, k: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(int(rng.integers(2**63))).spawn(k)


def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


def _residual_threshold(pairs: Sequence[GenerativePair], threshold: Optional[float]) -> float:
    return 1e-3 * math.sqrt(pairs[0].n_outputs) if threshold is None else threshold


# --- reconstruction helpers -------------------------------------------------------


def _encode_item(item):
    pair, x, seed = item
    return encode(pair, x, np.random.default_rng(seed))


def encode_dataset(pairs: Sequence[GenerativePair], dataset: Dataset, rng: np.random.Generator,
                   jobs: int = 1) -> list[Encoding]:
    """Encode every point with its own class's encoder."""
    seeds = _streams(rng, len(dataset))
    items = [(pairs[int(y)], x, s) for (x, y), s in zip(zip(dataset.xs, dataset.labels), seeds)]
    return _map(_encode_item, items, jobs)


# --- accuracy-type latent metrics -------------------------------------------------


def lga(classifier, pairs: Sequence[GenerativePair], prior, k: int,
        rng: np.random.Generator) -> MetricEstimate:
    """Accuracy on generated points: class from ``prior``, latent from ``N(0, I)``."""
    if k < 1:
        raise ValueError("k must be positive")
    prior = validate_prior(prior, len(pairs))
    labels = rng.choice(len(pairs), size=k, p=prior)
    latents = rng.standard_normal((k, pairs[0].n_latent))
    correct = np.zeros(k, dtype=bool)
    for i, pair in enumerate(pairs):
        sel = labels == i
        if sel.any():
            correct[sel] = classifier.classify_batch(pair.decode_batch(latents[sel])) == i
    return bernoulli_estimate("LGA", correct)


def lra(classifier, pairs: Sequence[GenerativePair], dataset: Dataset, rng: np.random.Generator,
        encodings: Optional[Sequence[Encoding]] = None, residual_threshold: Optional[float] = None,
        jobs: int = 1) -> MetricEstimate:
    """Accuracy on reconstructions ``decode_i(encode_i(x))`` of dataset points.

    Points whose reconstruction residual exceeds ``residual_threshold``
    (default ``1e-3 * sqrt(n_I)``) stay in the estimate and are counted in
    ``flagged``.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if encodings is None:
        encodings = encode_dataset(pairs, dataset, rng, jobs)
    thr = _residual_threshold(pairs, residual_threshold)
    correct = np.zeros(len(dataset), dtype=bool)
    for j, (enc, y) in enumerate(zip(encodings, dataset.labels)):
        y = int(y)
        correct[j] = classifier.classify(pairs[y].decode(enc.latent)) == y
    est = bernoulli_estimate("LRA", correct)
    est.flagged = sum(enc.residual > thr for enc in encodings)
    return est


def llna(classifier, pair: GenerativePair, x, i: int, epsilon: float, k: int,
         rng: np.random.Generator, encoding: Optional[Encoding] = None,
         residual_threshold: Optional[float] = None) -> MetricEstimate:
    """Accuracy under latent noise of magnitude ``epsilon`` around ``encode_i(x)``."""
    if k < 1:
        raise ValueError("k must be positive")
    if encoding is None:
        encoding = encode(pair, x, rng)
    noisy = sample_noisy_batch(encoding.latent, epsilon, k, rng)
    correct = classifier.classify_batch(pair.decode_batch(noisy)) == i
    est = bernoulli_estimate("LLNA", correct, epsilon=epsilon)
    est.flagged = int(encoding.residual > _residual_threshold([pair], residual_threshold))
    return est


def mean_llna(classifier, pairs: Sequence[GenerativePair], dataset: Dataset, epsilon: float,
              k: int, rng: np.random.Generator, encodings: Sequence[Encoding]) -> MetricEstimate:
    """Per-point LLNA averaged over a dataset (a noise-accuracy analogue in latent space)."""
    outcomes = []
    for enc, x, y in zip(encodings, dataset.xs, dataset.labels):
        y = int(y)
        est = llna(classifier, pairs[y], x, y, epsilon, k, rng, encoding=enc)
        outcomes.append(est.value)
    # the interval treats the per-point LLNA values as the samples
    est = severity_estimate("LLNA_mean", outcomes, epsilon=epsilon, draws_per_point=k)
    est.kind = "accuracy"
    est.ci_low, est.ci_high = max(0.0, est.ci_low), min(1.0, est.ci_high)
    return est


# --- adversarial latent metrics ---------------------------------------------------


def llar_threshold_check(classifier: FeedForwardClassifier, pair: GenerativePair, i: int, l0,
                         epsilon: float, rho: float, config: AttackConfig = AttackConfig(),
                         rng: Optional[np.random.Generator] = None) -> bool:
    """True when PGD finds no class change within scaled norm ``rho`` of the decayed ``l0``.

    That is, the transformed robustness exceeds ``rho`` as far as the attack
    can tell.
    """
    rng = config.generator() if rng is None else rng
    l1 = decayed(l0, epsilon)
    (res,) = pgd_bounded_nested(classifier, pair, i, l1, [rho], config, rng)
    return not res.success


def _rhos(rho) -> tuple[list[float], bool]:
    if np.ndim(rho) == 0:
        return [float(rho)], True
    return [float(r) for r in rho], False


def _threshold_item(item):
    classifier, pair, i, l0, epsilon, rhos, config, seed = item
    rng = np.random.default_rng(seed)
    l1 = decayed(l0, epsilon)
    return [not r.success for r in pgd_bounded_nested(classifier, pair, i, l1, rhos, config, rng)]


def _frequency(name, classifier, pairs, labels, latents, epsilon, rho, config, rng, jobs):
    rhos, scalar = _rhos(rho)
    if any(r <= 0 for r in rhos):
        raise ValueError("rho must be positive")
    seeds = _streams(rng, len(labels))
    items = [(classifier, pairs[int(i)], int(i), l0, epsilon, rhos, config, s)
             for i, l0, s in zip(labels, latents, seeds)]
    robust = np.array(_map(_threshold_item, items, jobs), dtype=bool).reshape(len(items), len(rhos))
    out = [bernoulli_estimate(name, robust[:, c], epsilon=epsilon, rho=r)
           for c, r in enumerate(rhos)]
    return out[0] if scalar else out


def laga(classifier, pairs: Sequence[GenerativePair], prior, epsilon: float, rho, k: int,
         config: AttackConfig = AttackConfig(), rng: Optional[np.random.Generator] = None,
         jobs: int = 1):
    """Share of generated points whose latent robustness exceeds ``rho``.

    ``rho`` may be a list; checks at larger radii inherit the attacks made at
    smaller ones, so the estimates are non-increasing in ``rho``.
    """
    rng = config.generator() if rng is None else rng
    prior = validate_prior(prior, len(pairs))
    labels = rng.choice(len(pairs), size=k, p=prior)
    latents = rng.standard_normal((k, pairs[0].n_latent))
    return _frequency("LAGA", classifier, pairs, labels, latents, epsilon, rho, config, rng, jobs)


def lara(classifier, pairs: Sequence[GenerativePair], dataset: Dataset, epsilon: float, rho,
         config: AttackConfig = AttackConfig(), rng: Optional[np.random.Generator] = None,
         encodings: Optional[Sequence[Encoding]] = None, jobs: int = 1):
    """Share of reconstructed dataset points whose latent robustness exceeds ``rho``."""
    rng = config.generator() if rng is None else rng
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if encodings is None:
        encodings = encode_dataset(pairs, dataset, rng, jobs)
    latents = np.array([e.latent for e in encodings])
    return _frequency("LARA", classifier, pairs, dataset.labels, latents, epsilon, rho, config,
                      rng, jobs)


def _min_norm_item(item):
    classifier, pair, i, l0, epsilon, config, seed = item
    rng = np.random.default_rng(seed)
    l1 = decayed(l0, epsilon)
    res = pgd_min_norm(classifier, pair, i, l1, config, rng)
    dx = pair.decode(l1 + res.delta) - pair.decode(l0)
    return {
        "rho_hat": res.rho_hat,
        "perturbed_latent_scaled_norm": scaled_norm(l1 + res.delta),
        "dx_l1": float(np.abs(dx).sum()),
        "dx_l2": float(np.linalg.norm(dx)),
        "success": bool(res.success),
    }


def _severity(name, classifier, pairs, labels, latents, epsilon, config, rng, jobs):
    seeds = _streams(rng, len(labels))
    items = [(classifier, pairs[int(i)], int(i), l0, epsilon, config, s)
             for i, l0, s in zip(labels, latents, seeds)]
    records = _map(_min_norm_item, items, jobs)
    for j, rec in enumerate(records):
        rec["sample_id"] = j
        rec["epsilon"] = epsilon
    return severity_estimate(name, [r["rho_hat"] for r in records], records, epsilon=epsilon)


def lags(classifier, pairs: Sequence[GenerativePair], prior, epsilon: float, k: int,
         config: AttackConfig = AttackConfig(), rng: Optional[np.random.Generator] = None,
         jobs: int = 1) -> MetricEstimate:
    """Mean approximate minimum latent perturbation (scaled norm) over generated points.

    The attack's norms are upper bounds on the true minimum, so the estimate
    is biased upward.  Failed searches are excluded and counted in
    ``failures``.
    """
    rng = config.generator() if rng is None else rng
    prior = validate_prior(prior, len(pairs))
    labels = rng.choice(len(pairs), size=k, p=prior)
    latents = rng.standard_normal((k, pairs[0].n_latent))
    return _severity("LAGS", classifier, pairs, labels, latents, epsilon, config, rng, jobs)


def lars(classifier, pairs: Sequence[GenerativePair], dataset: Dataset, epsilon: float,
         config: AttackConfig = AttackConfig(), rng: Optional[np.random.Generator] = None,
         encodings: Optional[Sequence[Encoding]] = None, jobs: int = 1) -> MetricEstimate:
    rng = config.generator() if rng is None else rng
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if encodings is None:
        encodings = encode_dataset(pairs, dataset, rng, jobs)
    latents = np.array([e.latent for e in encodings])
    return _severity("LARS", classifier, pairs, dataset.labels, latents, epsilon, config, rng,
                     jobs)


# --- conventional metrics ---------------------------------------------------------


def clean_accuracy(classifier, dataset: Dataset) -> MetricEstimate:
    return bernoulli_estimate("clean_accuracy", classifier.classify_batch(dataset.xs) == dataset.labels)


def noise_accuracy(classifier, dataset: Dataset, sigma: float,
                   rng: np.random.Generator) -> MetricEstimate:
    """Accuracy on inputs with ``sigma * N(0, I)`` added (no clamping)."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    xs = dataset.xs + sigma * rng.standard_normal(dataset.xs.shape) if sigma else dataset.xs
    return bernoulli_estimate("noise_accuracy", classifier.classify_batch(xs) == dataset.labels,
                              sigma=sigma)


def _original_item(item):
    classifier, x, i, norm_kind, config, seed = item
    res = pgd_original_space(classifier, x, i, norm_kind, config, np.random.default_rng(seed))
    return {
        "rho_hat": res.rho_hat,
        "dx_l1": float(np.abs(res.delta).sum()),
        "dx_l2": float(np.linalg.norm(res.delta)),
        "dx_linf": float(np.abs(res.delta).max()),
        "success": bool(res.success),
    }


def adversarial_severity(classifier: FeedForwardClassifier, dataset: Dataset,
                         norm_kind: str = "l2_scaled",
                         config: AttackConfig = AttackConfig.original_space(),
                         rng: Optional[np.random.Generator] = None, jobs: int = 1) -> MetricEstimate:
    """Mean minimum input-space perturbation found by PGD with shrinkage.

    ``l2_scaled`` divides the l2 norm by ``sqrt(n_I)``, ``linf_scaled`` the
    l-infinity norm by ``n_I``.  Already misclassified points contribute 0.
    """
    rng = config.generator() if rng is None else rng
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    seeds = _streams(rng, len(dataset))
    items = [(classifier, x, int(y), norm_kind, config, s)
             for x, y, s in zip(dataset.xs, dataset.labels, seeds)]
    records = _map(_original_item, items, jobs)
    for j, rec in enumerate(records):
        rec["sample_id"] = j
    suffix = "l2" if norm_kind == "l2_scaled" else "linf"
    return severity_estimate(f"adversarial_severity_{suffix}", [r["rho_hat"] for r in records],
                             records, norm_kind=norm_kind)


# --- correlations -----------------------------------------------------------------


@dataclass(frozen=True)
class Correlation:
    pearson: float
    spearman: float
    defined: bool = True


def correlations(series_a, series_b) -> Correlation:
    """Sample Pearson r and Spearman rho (average ranks for ties).

    A constant series has no defined correlation: both values come back NaN
    with ``defined=False``.
    """
    a = np.asarray(series_a, dtype=np.float64)
    b = np.asarray(series_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("series must be 1-D and of equal length")
    if a.size < 3:
        raise ValueError("need at least three points")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("series contain non-finite values")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return Correlation(math.nan, math.nan, False)
    pearson = float(np.clip(stats.pearsonr(a, b)[0], -1.0, 1.0))
    spearman = float(np.clip(stats.spearmanr(a, b)[0], -1.0, 1.0))
    return Correlation(pearson, spearman)
