"""Distribution-preserving Gaussian noise on latent vectors.

With a standard normal latent prior, ``l' = (l + eps * dl) / sqrt(1 + eps^2)``
leaves the prior unchanged, shrinks to the identity as ``eps -> 0`` and
forgets ``l`` as ``eps -> inf``.  Its density around the decayed point
``l / sqrt(1 + eps^2)`` depends on the perturbation only through its l2
norm, which lets likelihood bounds be handled as norm balls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .ndiff import as_vector


def _check_epsilon(epsilon: float, allow_zero: bool) -> float:
    epsilon = float(epsilon)
    if not math.isfinite(epsilon) or epsilon < 0:
        raise ValueError(f"epsilon must be finite and non-negative, got {epsilon}")
    if epsilon == 0 and not allow_zero:
        raise ValueError("the noise density is degenerate at epsilon = 0")
    return epsilon


def decay_factor(epsilon: float) -> float:
    """``1 - 1 / sqrt(1 + eps^2)``: how much the unperturbed vector shrinks."""
    epsilon = _check_epsilon(epsilon, allow_zero=True)
    return 1.0 - 1.0 / math.sqrt(1.0 + epsilon * epsilon)


def decayed(l, epsilon: float) -> np.ndarray:
    """The mean of the noisy vector, ``(1 - d) * l``."""
    return as_vector(l, "l") * (1.0 - decay_factor(epsilon))


def sample_noisy(l, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """One draw of ``(l + eps * dl) / sqrt(1 + eps^2)`` with ``dl ~ N(0, I)``."""
    l = as_vector(l, "l")
    epsilon = _check_epsilon(epsilon, allow_zero=True)
    if epsilon == 0:
        return l.copy()
    noise = rng.standard_normal(l.size)
    return (l + epsilon * noise) / math.sqrt(1.0 + epsilon * epsilon)


def sample_noisy_batch(l, epsilon: float, k: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` independent draws around the same ``l`` as rows of a ``(k, n_L)`` array."""
    l = as_vector(l, "l")
    epsilon = _check_epsilon(epsilon, allow_zero=True)
    if epsilon == 0:
        return np.tile(l, (k, 1))
    noise = rng.standard_normal((k, l.size))
    return (l + epsilon * noise) / math.sqrt(1.0 + epsilon * epsilon)


def likelihood_constants(epsilon: float, n_latent: int) -> tuple[float, float]:
    """``(c1, c2)`` such that the log-density of a perturbation is ``c1 - c2 * ||dl||^2``."""
    epsilon = _check_epsilon(epsilon, allow_zero=False)
    e2 = epsilon * epsilon
    # log sqrt((1+e2)/(2 pi e2)), written to stay accurate for tiny and huge epsilon
    c1 = n_latent * 0.5 * (math.log1p(e2) - math.log(2.0 * math.pi) - 2.0 * math.log(epsilon))
    c2 = (1.0 + e2) / (2.0 * e2)
    return c1, c2


def log_likelihood(delta_l, epsilon: float) -> float:
    """Log-density of the latent perturbation ``delta_l`` under noise magnitude ``epsilon``."""
    delta_l = as_vector(delta_l, "delta_l")
    c1, c2 = likelihood_constants(epsilon, delta_l.size)
    return c1 - c2 * float(delta_l @ delta_l)


def g_transform_log(log_tau: float, epsilon: float, n_latent: int) -> float:
    """Scaled-norm radius of the set of perturbations with log-likelihood >= ``log_tau``."""
    c1, c2 = likelihood_constants(epsilon, n_latent)
    gap = c1 - float(log_tau)
    if gap < 0:
        if gap > -1e-12 * max(1.0, abs(c1)):
            gap = 0.0
        else:
            raise ValueError("likelihood threshold exceeds the maximum density; no perturbation attains it")
    return math.sqrt(gap / (n_latent * c2))


def g_transform(tau: float, epsilon: float, n_latent: int) -> float:
    """Convert a likelihood threshold ``tau`` into a scaled-norm bound.

    Strictly decreasing in ``tau``; equals zero at the maximum density
    ``exp(c1)``.
    """
    tau = float(tau)
    if not tau > 0:
        raise ValueError("likelihood threshold must be positive")
    return g_transform_log(math.log(tau), epsilon, n_latent)


def g_inverse_log(rho: float, epsilon: float, n_latent: int) -> float:
    """Log-likelihood threshold whose transformed radius is ``rho``."""
    if rho < 0:
        raise ValueError("rho must be non-negative")
    c1, c2 = likelihood_constants(epsilon, n_latent)
    return c1 - c2 * n_latent * rho * rho


def scaled_norm(v) -> float:
    """``||v||_2 / sqrt(len(v))``; a standard normal vector has mean squared value one."""
    v = np.asarray(v, dtype=np.float64)
    return float(np.linalg.norm(v) / math.sqrt(v.size))


@dataclass(frozen=True)
class NoiseBudget:
    """Noise magnitude with its decay factor and a scaled-norm bound.

    ``log_tau`` is stored in log form because the raw density spans many
    orders of magnitude for small ``epsilon``.
    """

    epsilon: float
    rho: float
    n_latent: int
    log_tau: Optional[float] = None

    def __post_init__(self):
        _check_epsilon(self.epsilon, allow_zero=True)
        if self.rho < 0:
            raise ValueError("rho must be non-negative")
        if self.log_tau is not None:
            expect = g_transform_log(self.log_tau, self.epsilon, self.n_latent)
            if not math.isclose(expect, self.rho, rel_tol=1e-9, abs_tol=1e-12):
                raise ValueError("rho and tau are inconsistent")

    @property
    def decay(self) -> float:
        return decay_factor(self.epsilon)

    @classmethod
    def from_rho(cls, epsilon: float, rho: float, n_latent: int) -> "NoiseBudget":
        log_tau = g_inverse_log(rho, epsilon, n_latent) if epsilon > 0 else None
        return cls(epsilon, rho, n_latent, log_tau)

    @classmethod
    def from_tau(cls, epsilon: float, tau: float, n_latent: int) -> "NoiseBudget":
        rho = g_transform(tau, epsilon, n_latent)
        return cls(epsilon, rho, n_latent, math.log(tau))
