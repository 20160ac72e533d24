"""Domain objects: covariate box, dataset, policy/utility models, composite utility.

Conventions
-----------
Covariates are always 2-d arrays of shape (n, d).  Model callables are
vectorized over rows: ``pi(X, a) -> (n,)`` and ``grad_pi(X, a) -> (n, d)``.
All objects are immutable after construction; evaluation is pure, so shared
models are safe under unrestricted concurrency.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Protocol, runtime_checkable

import numpy as np

from .exceptions import DomainError, ValidationError

PROB_CLOSURE_TOL = 1e-10
GRAD_CHECK_STEP = 1e-6
GRAD_CHECK_RTOL = 1e-4


def as_points(x: np.ndarray | list, dim: int) -> np.ndarray:
    """Coerce a single point or a batch to shape (n, dim)."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        if arr.shape[0] != dim:
            raise ValidationError(f"expected point of dimension {dim}, got shape {arr.shape}")
        return arr.reshape(1, dim)
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValidationError(f"expected (n, {dim}) array, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class CovariateSpace:
    """Axis-aligned covariate box."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lower.shape != upper.shape or lower.ndim != 1:
            raise ValidationError("lower/upper must be 1-d arrays of equal length")
        if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
            raise ValidationError("box bounds must be finite")
        if not np.all(lower < upper):
            raise ValidationError("every lower bound must be strictly below its upper bound")
        lower.setflags(write=False)
        upper.setflags(write=False)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @classmethod
    def from_data(cls, X: np.ndarray, pad: float = 0.05) -> "CovariateSpace":
        """Bounding box of the data, padded by ``pad`` of the per-axis range."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        lo, hi = X.min(axis=0), X.max(axis=0)
        span = np.maximum(hi - lo, 1e-12)
        return cls(lo - pad * span, hi + pad * span)

    def contains(self, X: np.ndarray, atol: float = 1e-12) -> np.ndarray:
        X = as_points(X, self.dim)
        return np.all((X >= self.lower - atol) & (X <= self.upper + atol), axis=1)

    def require_inside(self, X: np.ndarray) -> np.ndarray:
        X = as_points(X, self.dim)
        ok = self.contains(X)
        if not np.all(ok):
            bad = X[~ok][0]
            raise DomainError(f"point {bad.tolist()} outside covariate box")
        return X

    def clip(self, X: np.ndarray) -> np.ndarray:
        return np.clip(as_points(X, self.dim), self.lower, self.upper)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))

    def lattice(self, points_per_axis: int) -> np.ndarray:
        """Regular lattice including the box corners, flattened to (L, d)."""
        axes = [np.linspace(lo, hi, points_per_axis) for lo, hi in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass(frozen=True)
class Sample:
    """One record: covariates, group label, treatment, utility outcome."""

    x: np.ndarray
    s: int
    w: int
    y: float


@dataclass(frozen=True)
class Dataset:
    """Immutable sample arrays plus their covariate box.

    Invariants enforced at construction: nonempty, covariates inside the
    box, both groups present, binary s/w, outcomes within [0, outcome_bound].
    """

    X: np.ndarray
    s: np.ndarray
    w: np.ndarray
    y: np.ndarray
    space: CovariateSpace
    outcome_bound: float = None  # defaults to max(y)

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        s = np.asarray(self.s, dtype=int)
        w = np.asarray(self.w, dtype=int)
        y = np.asarray(self.y, dtype=float)
        n = X.shape[0]
        if n == 0:
            raise ValidationError("dataset is empty")
        if not (s.shape == w.shape == y.shape == (n,)):
            raise ValidationError("X, s, w, y must have matching first dimension")
        if X.shape[1] != self.space.dim:
            raise ValidationError(f"covariate dimension {X.shape[1]} != box dimension {self.space.dim}")
        if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
            raise ValidationError("non-finite values in dataset")
        if not np.all(self.space.contains(X)):
            idx = int(np.flatnonzero(~self.space.contains(X))[0])
            raise ValidationError(f"sample {idx} lies outside the covariate box")
        if not np.all(np.isin(s, (0, 1))) or not np.all(np.isin(w, (0, 1))):
            raise ValidationError("s and w must be binary 0/1")
        if len(np.unique(s)) < 2:
            raise ValidationError("both groups s=0 and s=1 must be present")
        bound = float(np.max(y)) if self.outcome_bound is None else float(self.outcome_bound)
        if np.any(y < 0) or np.any(y > bound):
            raise ValidationError(f"outcomes must lie in [0, {bound}]")
        for arr in (X, s, w, y):
            arr.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "outcome_bound", bound)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @classmethod
    def from_samples(cls, samples: list[Sample], space: CovariateSpace, outcome_bound: float = None) -> "Dataset":
        if not samples:
            raise ValidationError("dataset is empty")
        X = np.stack([np.atleast_1d(np.asarray(rec.x, dtype=float)) for rec in samples])
        s = np.array([rec.s for rec in samples])
        w = np.array([rec.w for rec in samples])
        y = np.array([rec.y for rec in samples], dtype=float)
        return cls(X, s, w, y, space, outcome_bound)


@runtime_checkable
class PolicyModel(Protocol):
    """Propensity interface: treatment probability per group, with gradients."""

    def pi(self, X: np.ndarray, a: int) -> np.ndarray: ...

    def grad_pi(self, X: np.ndarray, a: int) -> np.ndarray: ...


@runtime_checkable
class UtilityModel(Protocol):
    """Conditional utilities m_w, group probabilities p_a, and their gradients."""

    def m(self, w: int, X: np.ndarray, a: int) -> np.ndarray: ...

    def grad_m(self, w: int, X: np.ndarray, a: int) -> np.ndarray: ...

    def p(self, X: np.ndarray, a: int) -> np.ndarray: ...

    def grad_p(self, X: np.ndarray, a: int) -> np.ndarray: ...


@dataclass(frozen=True)
class AnalyticPolicy:
    """Policy from closed-form callables ``fn(X, a) -> (n,)`` / ``(n, d)``."""

    pi_fn: Callable
    grad_pi_fn: Callable

    def pi(self, X, a):
        return np.asarray(self.pi_fn(X, a), dtype=float)

    def grad_pi(self, X, a):
        return np.atleast_2d(np.asarray(self.grad_pi_fn(X, a), dtype=float))


@dataclass(frozen=True)
class AnalyticUtility:
    """Utility model from closed-form callables."""

    m_fn: Callable
    grad_m_fn: Callable
    p_fn: Callable
    grad_p_fn: Callable

    def m(self, w, X, a):
        return np.asarray(self.m_fn(w, X, a), dtype=float)

    def grad_m(self, w, X, a):
        return np.atleast_2d(np.asarray(self.grad_m_fn(w, X, a), dtype=float))

    def p(self, X, a):
        return np.asarray(self.p_fn(X, a), dtype=float)

    def grad_p(self, X, a):
        return np.atleast_2d(np.asarray(self.grad_p_fn(X, a), dtype=float))


class CompositeUtility:
    """Population utility integrand M and its gradient.

    M(x) = sum over groups a of p_a(x) * [m1(x,a) pi_a(x) + m0(x,a) (1 - pi_a(x))].

    The evaluation order is fixed (group 0 term plus group 1 term, each as
    written above) so independently coded references can match bitwise.
    """

    def __init__(self, policy: PolicyModel, utility: UtilityModel, space: CovariateSpace):
        self.policy = policy
        self.utility = utility
        self.space = space

    def _term(self, X: np.ndarray, a: int) -> np.ndarray:
        pa = self.utility.p(X, a)
        pia = self.policy.pi(X, a)
        m1 = self.utility.m(1, X, a)
        m0 = self.utility.m(0, X, a)
        return pa * (m1 * pia + m0 * (1.0 - pia))

    def value(self, X: np.ndarray) -> np.ndarray:
        X = as_points(X, self.space.dim)
        return self._term(X, 0) + self._term(X, 1)

    def gradient(self, X: np.ndarray) -> np.ndarray:
        X = as_points(X, self.space.dim)
        total = np.zeros_like(X)
        for a in (0, 1):
            pa = self.utility.p(X, a)[:, None]
            gpa = self.utility.grad_p(X, a)
            pia = self.policy.pi(X, a)[:, None]
            gpia = self.policy.grad_pi(X, a)
            m1 = self.utility.m(1, X, a)[:, None]
            m0 = self.utility.m(0, X, a)[:, None]
            gm1 = self.utility.grad_m(1, X, a)
            gm0 = self.utility.grad_m(0, X, a)
            inner = m1 * pia + m0 * (1.0 - pia)
            ginner = gm1 * pia + m1 * gpia + gm0 * (1.0 - pia) - m0 * gpia
            total = total + gpa * inner + pa * ginner
        return total

    def gap(self, X: np.ndarray) -> np.ndarray:
        X = as_points(X, self.space.dim)
        return np.abs(self.policy.pi(X, 1) - self.policy.pi(X, 0))

    def gap_gradient(self, X: np.ndarray) -> np.ndarray:
        """Gradient of pi_1 - pi_0 (signed difference, not of its absolute value)."""
        X = as_points(X, self.space.dim)
        return self.policy.grad_pi(X, 1) - self.policy.grad_pi(X, 0)


@dataclass(frozen=True)
class SummaryStats:
    mean_M: float
    var_M: float
    mean_gap: float
    var_gap: float


def eval_M(model: CompositeUtility, x: np.ndarray) -> float:
    """Composite utility at a single in-box point."""
    X = model.space.require_inside(x)
    return float(model.value(X)[0])


def eval_gradM(model: CompositeUtility, x: np.ndarray) -> np.ndarray:
    """Gradient of the composite utility at a single in-box point."""
    X = model.space.require_inside(x)
    return model.gradient(X)[0]


def fairness_gap(policy: PolicyModel, x: np.ndarray, space: CovariateSpace = None) -> float:
    """|pi_1(x) - pi_0(x)| at a single point (validated against the box when given)."""
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    X = arr.reshape(1, -1)
    if space is not None:
        X = space.require_inside(X)
    return float(abs(policy.pi(X, 1)[0] - policy.pi(X, 0)[0]))


def empirical_summaries(model: CompositeUtility, data: Dataset) -> SummaryStats:
    """Sample means and unbiased variances of M(X_i) and |pi_1 - pi_0|(X_i)."""
    if data.n < 2:
        raise ValidationError("variance undefined for fewer than 2 samples")
    mvals = model.value(data.X)
    gvals = model.gap(data.X)
    return SummaryStats(
        mean_M=float(np.mean(mvals)),
        var_M=float(np.var(mvals, ddof=1)),
        mean_gap=float(np.mean(gvals)),
        var_gap=float(np.var(gvals, ddof=1)),
    )


def check_gradient(
    fn: Callable[[np.ndarray], np.ndarray],
    grad: Callable[[np.ndarray], np.ndarray],
    space: CovariateSpace,
    rng: np.random.Generator,
    n_probes: int = 100,
    step: float = GRAD_CHECK_STEP,
    rtol: float = GRAD_CHECK_RTOL,
) -> float:
    """Max relative disagreement between ``grad`` and central differences of ``fn``.

    Probes are drawn inside the box shrunk by the step so x +/- h stays feasible.
    Returns the worst relative error; callers compare against ``rtol``.
    """
    shrink = step * 2.0
    lo = space.lower + shrink
    hi = space.upper - shrink
    probes = rng.uniform(lo, hi, size=(n_probes, space.dim))
    analytic = np.atleast_2d(grad(probes))
    worst = 0.0
    for j in range(space.dim):
        e = np.zeros(space.dim)
        e[j] = step
        fd = (fn(probes + e) - fn(probes - e)) / (2.0 * step)
        scale = np.maximum(np.abs(fd), 1.0)
        worst = max(worst, float(np.max(np.abs(analytic[:, j] - fd) / scale)))
    return worst


def validate_policy(policy: PolicyModel, space: CovariateSpace, rng: np.random.Generator, n_probes: int = 100) -> None:
    """Range and gradient checks for a policy on random in-box probes."""
    probes = space.sample(rng, max(n_probes, 1000))
    for a in (0, 1):
        vals = policy.pi(probes, a)
        if np.any(vals < -1e-12) or np.any(vals > 1 + 1e-12):
            raise ValidationError(f"pi(., {a}) leaves [0, 1] on the box")
        err = check_gradient(lambda X, a=a: policy.pi(X, a), lambda X, a=a: policy.grad_pi(X, a), space, rng, n_probes)
        if err > GRAD_CHECK_RTOL:
            raise ValidationError(f"grad_pi(., {a}) disagrees with finite differences (rel err {err:.2e})")


def validate_utility(utility: UtilityModel, space: CovariateSpace, rng: np.random.Generator, n_probes: int = 100) -> None:
    """Probability closure and gradient checks for a utility model."""
    probes = space.sample(rng, max(n_probes, 1000))
    closure = utility.p(probes, 0) + utility.p(probes, 1)
    if np.max(np.abs(closure - 1.0)) > PROB_CLOSURE_TOL:
        raise ValidationError("group probabilities do not sum to 1")
    rng_local = np.random.default_rng(rng.integers(2**63))
    for a in (0, 1):
        for w in (0, 1):
            err = check_gradient(
                lambda X, w=w, a=a: utility.m(w, X, a),
                lambda X, w=w, a=a: utility.grad_m(w, X, a),
                space,
                rng_local,
                n_probes,
            )
            if err > GRAD_CHECK_RTOL:
                raise ValidationError(f"grad_m({w}, ., {a}) disagrees with finite differences (rel err {err:.2e})")
