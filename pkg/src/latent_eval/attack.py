"""Untargeted PGD searches for class-changing perturbations.

Three entry points share one inner loop:

* :func:`pgd_bounded` looks for any misclassifying latent perturbation
  inside a scaled-norm ball (threshold checks).
* :func:`pgd_min_norm` looks for a small one by shrinking the ball to the
  best solution found so far before each restart.
* :func:`pgd_original_space` runs the same shrinking search directly on
  classifier inputs, for the l2 or l-infinity norm.

Gradients are normalised by their scaled norm (or replaced by their sign
for l-infinity), so a step of ``step_size * rho`` always has the same
length relative to the ball.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import ndiff
from .latentnoise import scaled_norm
from .models import FeedForwardClassifier, GenerativePair
from .ndiff import DimensionError, as_vector

STALL_THRESHOLD = 1e-12
NORM_KINDS = ("l2_scaled", "linf_scaled")


@dataclass(frozen=True)
class AttackConfig:
    """Knobs of the PGD searches.

    ``step_size`` is a fraction of the current ``rho``.  The min-norm search
    makes its first run from zero with ``first_step_size`` for
    ``first_steps`` steps (default: just enough to cross the ball twice).
    """

    steps: int = 50
    step_size: float = 0.05
    restarts: int = 12
    initial_rho: float = 2.5
    shrink: bool = True
    first_step_size: float = 0.01
    first_steps: Optional[int] = None
    refine_steps: int = 40
    stop_on_success: bool = True
    seed: Optional[int] = None

    def __post_init__(self):
        if self.steps < 1 or self.restarts < 1:
            raise ValueError("steps and restarts must be positive")
        if not (self.step_size > 0 and self.first_step_size > 0):
            raise ValueError("step sizes must be positive")
        if self.steps * self.step_size < 2.0 - 1e-12:
            raise ValueError("steps * step_size must be at least 2 so the ball boundary is reachable")
        if self.first_steps is not None and self.first_steps * self.first_step_size < 2.0 - 1e-12:
            raise ValueError("first_steps * first_step_size must be at least 2")
        if not self.initial_rho > 0:
            raise ValueError("initial_rho must be positive")
        if self.refine_steps < 0:
            raise ValueError("refine_steps must be non-negative")

    @property
    def first_run_steps(self) -> int:
        if self.first_steps is not None:
            return self.first_steps
        return int(math.ceil(2.0 / self.first_step_size - 1e-9))

    @classmethod
    def original_space(cls, **overrides) -> "AttackConfig":
        """Defaults for original-space severity: 15 runs of 50 steps of 0.05 rho."""
        return cls(**{"restarts": 15, **overrides})

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


@dataclass(frozen=True)
class RestartRecord:
    rho: float
    norm: float
    objective: float
    success: bool
    stalled: bool
    steps: int


@dataclass(frozen=True)
class AttackResult:
    """Outcome of a search.

    ``rho_hat`` is the norm of the returned perturbation when the search
    succeeded and ``inf`` otherwise.
    """

    success: bool
    delta: np.ndarray
    norm: float
    objective: float
    rho: float
    trace: tuple[RestartRecord, ...] = field(default=())
    norm_kind: str = "l2_scaled"

    @property
    def rho_hat(self) -> float:
        return self.norm if self.success else math.inf

    @property
    def stalled(self) -> bool:
        return any(r.stalled for r in self.trace)


# --- problem setup -------------------------------------------------------------


def _margin_expr(scores: ndiff.Expr, i: int, m: int) -> ndiff.Expr:
    others = [j for j in range(m) if j != i]
    return ndiff.Select(scores, [i]) - ndiff.Max(ndiff.Select(scores, others))


def _margin(scores: np.ndarray, i: int) -> float:
    others = np.delete(scores, i)
    return float(scores[i] - others.max())


class _Problem:
    """Perturbation search around ``base`` (latent or input space)."""

    def __init__(self, classifier: FeedForwardClassifier, decoder, i: int, base: np.ndarray,
                 norm_kind: str):
        if norm_kind not in NORM_KINDS:
            raise ValueError(f"norm_kind must be one of {NORM_KINDS}")
        m = classifier.n_classes
        if not 0 <= i < m:
            raise ValueError(f"class {i} out of range for {m} classes")
        self.classifier = classifier
        self.decoder = decoder
        self.i = i
        self.base = base
        self.n = base.size
        self.norm_kind = norm_kind
        var = ndiff.Variable(self.n)
        point = ndiff.Add(ndiff.Constant(base), var)
        x = decoder.expr(point) if decoder is not None else point
        self.expr = _margin_expr(classifier.expr(x), i, m)
        self.program = ndiff.Program(self.expr)

    def inputs(self, delta: np.ndarray) -> np.ndarray:
        point = self.base + delta
        if self.decoder is not None:
            point = self.decoder.decode(point)
        return point

    def objective(self, delta: np.ndarray) -> float:
        return _margin(self.classifier.scores(self.inputs(delta)), self.i)

    def value_and_grad(self, delta: np.ndarray) -> tuple[float, np.ndarray]:
        return self.program.value_and_gradient(delta)

    def misclassified(self, delta: np.ndarray) -> bool:
        return self.classifier.classify(self.inputs(delta)) != self.i

    def norm(self, delta: np.ndarray) -> float:
        if self.norm_kind == "l2_scaled":
            return scaled_norm(delta)
        return float(np.max(np.abs(delta)) / self.n)

    def direction(self, g: np.ndarray) -> Optional[np.ndarray]:
        """Unit-norm (in the chosen scaled norm) descent direction, or None on a stall."""
        if self.norm_kind == "l2_scaled":
            size = scaled_norm(g)
            if size < STALL_THRESHOLD:
                return None
            return g / size
        if np.max(np.abs(g)) < STALL_THRESHOLD:
            return None
        return np.sign(g) * self.n

    def project(self, delta: np.ndarray, rho: float) -> np.ndarray:
        if self.norm_kind == "l2_scaled":
            return project_to_ball(delta, rho)
        half = rho * self.n
        return np.clip(delta, -half, half)

    def random_in_ball(self, rho: float, rng: np.random.Generator) -> np.ndarray:
        if self.norm_kind == "l2_scaled":
            return random_in_ball(self.n, rho, rng)
        half = rho * self.n
        return rng.uniform(-half, half, self.n)


def objective(classifier: FeedForwardClassifier, pair: GenerativePair, i: int, l1, delta_l) -> float:
    """Score of class ``i`` minus the best other score at ``decode_i(l1 + delta_l)``.

    Positive means class ``i`` is still predicted, negative means it is not.
    """
    l1 = as_vector(l1, "l1")
    delta_l = as_vector(delta_l, "delta_l")
    if l1.size != delta_l.size or l1.size != pair.n_latent:
        raise DimensionError("latent dimensions disagree")
    x = pair.decode(l1 + delta_l)
    return _margin(classifier.scores(x), i)


def objective_expr(classifier: FeedForwardClassifier, pair: GenerativePair, i: int, l1) -> ndiff.Expr:
    """Differentiable objective as a function of the perturbation (input slot 0)."""
    return _Problem(classifier, pair.decoder, i, as_vector(l1, "l1"), "l2_scaled").expr


def project_to_ball(delta, rho: float) -> np.ndarray:
    """Rescale ``delta`` onto the scaled-norm ball of radius ``rho`` if it lies outside."""
    if rho < 0:
        raise ValueError("rho must be non-negative")
    delta = np.asarray(delta, dtype=np.float64)
    size = scaled_norm(delta)
    if size <= rho:
        return delta.copy()
    return delta * (rho / size)


def random_in_ball(n: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from the scaled-norm ball of radius ``rho`` in ``n`` dimensions."""
    direction = rng.standard_normal(n)
    direction /= scaled_norm(direction)
    radius = rho * rng.uniform() ** (1.0 / n)
    return project_to_ball(direction * radius, rho)


# --- inner loop ----------------------------------------------------------------


@dataclass
class _Run:
    delta: np.ndarray
    objective: float
    success: bool
    stalled: bool
    steps: int


def _refine(problem: _Problem, inside: np.ndarray, outside: np.ndarray, iters: int) -> np.ndarray:
    """Bisect the segment from a correctly classified point to a misclassified one.

    Returns a misclassified point on the segment, as close to the boundary
    as ``iters`` halvings allow.  On a convex ball every point of the segment
    stays feasible.
    """
    lo, hi = 0.0, 1.0
    step = outside - inside
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if problem.misclassified(inside + mid * step):
            hi = mid
        else:
            lo = mid
    return outside if hi == 1.0 else inside + hi * step


def _pull_in(problem: _Problem, delta: np.ndarray, iters: int) -> np.ndarray:
    """Bisect the segment from zero (correctly classified) to ``delta``; never raises the norm."""
    if iters == 0:
        return delta
    return _refine(problem, np.zeros_like(delta), delta, iters)


def _run(problem: _Problem, start: np.ndarray, rho: float, step_frac: float, steps: int,
         rng: np.random.Generator, refine_steps: int, exhaust: bool = False) -> _Run:
    """One PGD run from ``start``.

    By default the run stops at the first misclassified iterate.  With
    ``exhaust`` it keeps descending for the whole step budget and returns the
    smallest-norm misclassified point seen (after refinement), which is what
    the min-norm search wants: the descent settles where the class change is
    deepest, and pulling that point toward zero lands near the closest
    boundary.
    """
    delta = problem.project(start, rho)
    best: Optional[np.ndarray] = None
    best_norm = math.inf

    def offer(candidate: np.ndarray) -> None:
        nonlocal best, best_norm
        candidate = _pull_in(problem, candidate, refine_steps)
        size = problem.norm(candidate)
        if size < best_norm:
            best, best_norm = candidate, size

    if problem.misclassified(delta):
        offer(delta)
        if not exhaust:
            return _Run(best, problem.objective(best), True, False, 0)
    rerandomized = False
    stalled = False
    obj, g = problem.value_and_grad(delta)
    was_wrong = obj < 0
    taken = 0
    for taken in range(1, steps + 1):
        direction = problem.direction(g)
        if direction is None:
            if rerandomized:
                stalled = True
                break
            rerandomized = True
            delta = problem.random_in_ball(rho, rng)
            obj, g = problem.value_and_grad(delta)
            was_wrong = obj < 0
            continue
        prev = delta
        delta = problem.project(delta - step_frac * rho * direction, rho)
        obj, g = problem.value_and_grad(delta)
        # a strictly positive margin means class i wins; only exact ties need the classifier
        wrong = obj < 0 or (obj == 0 and problem.misclassified(delta))
        if wrong and not was_wrong:
            crossing = _refine(problem, prev, delta, refine_steps) if refine_steps else delta
            offer(crossing)
            if not exhaust:
                return _Run(best, problem.objective(best), True, False, taken)
        was_wrong = wrong
    if exhaust and problem.misclassified(delta):
        offer(delta)
    if best is not None:
        return _Run(best, problem.objective(best), True, stalled, taken)
    return _Run(delta, obj, False, stalled, taken)


def _record(problem: _Problem, run: _Run, rho: float) -> RestartRecord:
    return RestartRecord(rho, problem.norm(run.delta), run.objective, run.success, run.stalled,
                         run.steps)


def _result(problem: _Problem, delta: np.ndarray, rho: float, trace) -> AttackResult:
    # success is re-derived from the classifier, not from the loop's bookkeeping
    success = problem.misclassified(delta)
    return AttackResult(success, delta, problem.norm(delta), problem.objective(delta), rho,
                        tuple(trace), problem.norm_kind)


# --- public searches -----------------------------------------------------------


def _latent_problem(classifier, pair: GenerativePair, i: int, l1) -> _Problem:
    l1 = as_vector(l1, "l1")
    if l1.size != pair.n_latent:
        raise DimensionError(f"l1 has length {l1.size}, decoder takes {pair.n_latent}")
    if classifier.n_inputs != pair.n_outputs:
        raise DimensionError("decoder output does not match classifier input")
    return _Problem(classifier, pair.decoder, i, l1, "l2_scaled")


def _bounded(problem: _Problem, rho: float, config: AttackConfig, rng) -> AttackResult:
    if not rho > 0:
        raise ValueError("rho must be positive")
    best: Optional[_Run] = None
    trace = []
    for _ in range(config.restarts):
        start = problem.random_in_ball(rho, rng)
        run = _run(problem, start, rho, config.step_size, config.steps, rng, config.refine_steps)
        trace.append(_record(problem, run, rho))
        if best is None or (run.success, -run.objective) > (best.success, -best.objective):
            best = run
        if run.success and config.stop_on_success:
            break
    return _result(problem, best.delta, rho, trace)


def pgd_bounded(classifier: FeedForwardClassifier, pair: GenerativePair, i: int, l1, rho: float,
                config: AttackConfig = AttackConfig(), rng: Optional[np.random.Generator] = None
                ) -> AttackResult:
    """Search the ball ``scaled_norm(delta) <= rho`` around ``l1`` for a misclassification.

    Every restart starts at a uniform random point of the ball and stops as
    soon as the class changes.  The returned result is the most successful
    (lowest objective) restart.
    """
    rng = config.generator() if rng is None else rng
    return _bounded(_latent_problem(classifier, pair, i, l1), rho, config, rng)


def pgd_bounded_nested(classifier, pair: GenerativePair, i: int, l1, rhos, config: AttackConfig,
                       rng: Optional[np.random.Generator] = None) -> list[AttackResult]:
    """Threshold checks for increasing radii with nested budgets.

    The check at a radius inherits every success found at a smaller radius
    (the smaller ball lies inside the larger one), so success can only grow
    with ``rho``.  Each radius gets its own generator spawned from ``rng``.
    """
    rng = config.generator() if rng is None else rng
    problem = _latent_problem(classifier, pair, i, l1)
    order = sorted(range(len(rhos)), key=lambda k: rhos[k])
    seeds = np.random.SeedSequence(int(rng.integers(2**63))).spawn(len(rhos))
    out: list[Optional[AttackResult]] = [None] * len(rhos)
    found: Optional[AttackResult] = None
    for k in order:
        res = _bounded(problem, rhos[k], config, np.random.default_rng(seeds[k]))
        if not res.success and found is not None:
            res = replace(found, rho=rhos[k], trace=res.trace)
        elif res.success and found is None:
            found = res
        out[k] = res
    return out


def _min_norm(problem: _Problem, rho0: float, config: AttackConfig, rng) -> AttackResult:
    zero = np.zeros(problem.n)
    if problem.misclassified(zero):
        return _result(problem, zero, 0.0, [RestartRecord(0.0, 0.0, problem.objective(zero),
                                                           True, False, 0)])
    rho = rho0
    best: Optional[np.ndarray] = None
    best_norm = math.inf
    fallback: Optional[_Run] = None
    trace = []
    for r in range(config.restarts):
        if r == 0:
            run = _run(problem, zero, rho, config.first_step_size, config.first_run_steps, rng,
                       config.refine_steps, exhaust=True)
        else:
            start = problem.random_in_ball(rho, rng)
            run = _run(problem, start, rho, config.step_size, config.steps, rng,
                       config.refine_steps, exhaust=True)
        trace.append(_record(problem, run, rho))
        if run.success:
            size = problem.norm(run.delta)
            if size < best_norm:
                best, best_norm = run.delta, size
                if config.shrink:
                    rho = max(size, 0.0)
        elif fallback is None or run.objective < fallback.objective:
            fallback = run
        if best is not None and best_norm == 0.0:
            break
    delta = best if best is not None else fallback.delta
    return _result(problem, delta, rho, trace)


def pgd_min_norm(classifier: FeedForwardClassifier, pair: GenerativePair, i: int, l1,
                 config: AttackConfig = AttackConfig(), rng: Optional[np.random.Generator] = None
                 ) -> AttackResult:
    """Approximately minimal misclassifying latent perturbation around ``l1``.

    The first run starts at zero inside a ball of radius ``initial_rho`` with
    a small step.  Each later restart starts at a random point of a ball
    whose radius has shrunk to the best norm found so far, with the step
    shrinking in proportion.  If no run ever misclassifies, the result is
    unsuccessful and ``rho_hat`` is ``inf``.
    """
    rng = config.generator() if rng is None else rng
    return _min_norm(_latent_problem(classifier, pair, i, l1), config.initial_rho, config, rng)


def pgd_original_space(classifier: FeedForwardClassifier, x, i: int, norm_kind: str = "l2_scaled",
                       config: AttackConfig = AttackConfig.original_space(),
                       rng: Optional[np.random.Generator] = None) -> AttackResult:
    """Minimum-norm search on the classifier input itself.

    ``l2_scaled`` measures ``||dx||_2 / sqrt(n_I)``; ``linf_scaled`` measures
    ``||dx||_inf / n_I`` and steps along the gradient sign inside a box.
    For ``linf_scaled`` the starting radius is ``initial_rho / sqrt(n_I)``,
    which contains the l2 starting ball.
    """
    x = as_vector(x, "x")
    if x.size != classifier.n_inputs:
        raise DimensionError(f"x has length {x.size}, classifier takes {classifier.n_inputs}")
    rng = config.generator() if rng is None else rng
    problem = _Problem(classifier, None, i, x, norm_kind)
    rho0 = config.initial_rho
    if norm_kind == "linf_scaled":
        rho0 = rho0 / math.sqrt(x.size)
    return _min_norm(problem, rho0, config, rng)
