"""Box-constrained dual ascent for the projection test statistic.

The statistic is N times the value of

    sup_{0 <= lambda, alpha <= B}  lambda*r - alpha*eps
        + (1/N) sum_i min_{x in box} { ||x - X_i||^2 + alpha*|pi_1(x) - pi_0(x)| - lambda*M(x) }

The inner minimizations are seeded on a cached lattice and polished with
projected gradient descent on each smooth sign branch of the absolute gap;
polished points are proposals only and are always scored with the true
nonsmooth objective.  The outer objective is concave (a mean of minima of
affine functions of the multipliers), so golden-section coordinate ascent
from a multiscale grid seed converges to the box-constrained supremum.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import qmc

from .exceptions import BoundaryHitWarning, NumericError, UnboundedDualError, ValidationError
from .models import CompositeUtility, Dataset, SummaryStats, empirical_summaries

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
POLISH_SEEDS = 5
POLISH_ITERS = 25
BOUNDARY_REL_TOL = 1e-6


@dataclass(frozen=True)
class DualPoint:
    """Nonnegative multipliers (utility, fairness)."""

    lam: float
    alpha: float

    def __post_init__(self):
        if self.lam < 0 or self.alpha < 0:
            raise ValidationError("dual multipliers must be nonnegative")


@dataclass(frozen=True)
class SolverConfig:
    B_dual: float = 50.0
    inner_grid: int = 33
    inner_tol: float = 1e-10
    outer_tol: float = 1e-9
    max_outer_iters: int = 60
    restarts: int = 3
    max_doublings: int = 3

    def __post_init__(self):
        if self.B_dual <= 0:
            raise ValidationError("B_dual must be positive")
        if self.inner_grid < 3:
            raise ValidationError("inner_grid must be at least 3")
        if self.inner_tol <= 0 or self.outer_tol <= 0:
            raise ValidationError("tolerances must be positive")


@dataclass(frozen=True)
class DualSolution:
    value: float
    statistic: float
    argmax: DualPoint
    inner_minimizers: np.ndarray
    boundary_hit: bool
    b_dual_final: float
    doublings: int = 0
    n_evaluations: int = 0


@dataclass
class SolverCache:
    """Model values on a fixed lattice, reused across every (lambda, alpha)."""

    lattice: np.ndarray  # (L, d)
    gap: np.ndarray  # (L,)
    util: np.ndarray  # (L,)
    sq_dist: np.ndarray  # (N, L)
    X: np.ndarray  # (N, d)
    gap_at_X: np.ndarray  # (N,)
    util_at_X: np.ndarray  # (N,)
    n_evaluations: int = field(default=0)


def lattice_points(model: CompositeUtility, inner_grid: int) -> np.ndarray:
    space = model.space
    if space.dim <= 3:
        return space.lattice(inner_grid)
    sob = qmc.Sobol(d=space.dim, scramble=False)
    unit = sob.random_base2(m=12)
    return space.lower + unit * (space.upper - space.lower)


def build_cache(model: CompositeUtility, X: np.ndarray, cfg: SolverConfig) -> SolverCache:
    lattice = lattice_points(model, cfg.inner_grid)
    gap = model.gap(lattice)
    util = model.value(lattice)
    if not (np.all(np.isfinite(gap)) and np.all(np.isfinite(util))):
        bad = lattice[~(np.isfinite(gap) & np.isfinite(util))][0]
        raise NumericError(f"non-finite model output at x={bad.tolist()}")
    sq_dist = cdist(X, lattice, metric="sqeuclidean")
    return SolverCache(
        lattice=lattice,
        gap=gap,
        util=util,
        sq_dist=sq_dist,
        X=np.atleast_2d(X),
        gap_at_X=model.gap(X),
        util_at_X=model.value(X),
    )


def _polish(model, x0, anchors, signs, lam, alpha, inner_tol):
    """Vectorized projected gradient on the smooth sign branches.

    x0, anchors: (C, d); signs: (C,) in {-1, +1} selecting the branch per
    candidate.  Minimizes ||x-anchor||^2 + alpha*sign*(pi1-pi0)(x) - lam*M(x)
    over the box and returns the final iterates.  The distance term makes the
    objective nearly quadratic with Hessian ~ 2I, so the initial step 1/2 is
    close to exact and Armijo backtracking rarely fires.
    """
    space = model.space

    def value(x, anc, sgn):
        d = np.sum((x - anc) ** 2, axis=1)
        return d + alpha * sgn * (model.policy.pi(x, 1) - model.policy.pi(x, 0)) - lam * model.value(x)

    def grad(x, anc, sgn):
        return 2.0 * (x - anc) + alpha * sgn[:, None] * model.gap_gradient(x) - lam * model.gradient(x)

    x = space.clip(x0)
    f = value(x, anchors, signs)
    step = np.full(x.shape[0], 0.5)
    for _ in range(POLISH_ITERS):
        g = grad(x, anchors, signs)
        x_new = x.copy()
        f_new = f.copy()
        trial = step.copy()
        pending = np.ones(x.shape[0], dtype=bool)
        for _ in range(6):
            if not np.any(pending):
                break
            cand = space.clip(x[pending] - trial[pending, None] * g[pending])
            fc = value(cand, anchors[pending], signs[pending])
            needed = 1e-4 * np.sum(g[pending] * (x[pending] - cand), axis=1)
            ok = fc <= f[pending] - needed
            idx = np.flatnonzero(pending)
            good = idx[ok]
            x_new[good] = cand[ok]
            f_new[good] = fc[ok]
            pending[good] = False
            trial[pending] *= 0.5
        shift = float(np.max(np.abs(x_new - x), initial=0.0))
        x, f = x_new, f_new
        if shift < inner_tol:
            break
    return x


def _gamma_all(model: CompositeUtility, cache: SolverCache, lam: float, alpha: float, want_argmin: bool = False):
    """Inner minima for all samples at fixed multipliers.

    Returns (values, minimizers) with minimizers None unless requested.
    Candidates per sample: the lattice argmin, the sample point itself, and
    branch-polished refinements of the best lattice seeds; the reported value
    is the true objective at the best candidate (lexicographically smallest
    point on exact ties).
    """
    cache.n_evaluations += 1
    n, L = cache.sq_dist.shape
    d = cache.X.shape[1]
    plane = alpha * cache.gap - lam * cache.util
    obj = cache.sq_dist + plane[None, :]
    lat_idx = np.argmin(obj, axis=1)  # first occurrence = lexicographically smallest lattice point
    lat_val = obj[np.arange(n), lat_idx]
    if not np.all(np.isfinite(lat_val)):
        bad = cache.lattice[lat_idx[~np.isfinite(lat_val)][0]]
        raise NumericError(f"non-finite inner objective near x={bad.tolist()}")

    k = min(POLISH_SEEDS, L)
    seeds_idx = np.argpartition(obj, k - 1, axis=1)[:, :k]
    seeds = cache.lattice[seeds_idx.ravel()]
    anchors = np.repeat(cache.X, k, axis=0)

    cand_x = [cache.lattice[lat_idx], cache.X]
    cand_v = [lat_val, alpha * cache.gap_at_X - lam * cache.util_at_X]
    if lam != 0.0 or alpha != 0.0:
        both = np.vstack([seeds, seeds])
        anc = np.vstack([anchors, anchors])
        signs = np.concatenate([np.ones(seeds.shape[0]), -np.ones(seeds.shape[0])])
        pol = _polish(model, both, anc, signs, lam, alpha, 1e-8)
        dist = np.sum((pol - anc) ** 2, axis=1)
        true_val = dist + alpha * model.gap(pol) - lam * model.value(pol)
        cand_x.append(np.concatenate([pol[: n * k].reshape(n, k, d), pol[n * k :].reshape(n, k, d)], axis=1))
        cand_v.append(np.concatenate([true_val[: n * k].reshape(n, k), true_val[n * k :].reshape(n, k)], axis=1))

    xs = np.concatenate([c.reshape(n, -1, d) for c in cand_x], axis=1)
    vs = np.concatenate([v.reshape(n, -1) for v in cand_v], axis=1)
    best = np.min(vs, axis=1)
    if not want_argmin:
        return best, None
    minimizers = np.empty((n, d))
    for i in range(n):
        tie = np.flatnonzero(vs[i] == best[i])
        pts = xs[i, tie]
        order = np.lexsort(tuple(pts[:, j] for j in range(d - 1, -1, -1)))
        minimizers[i] = pts[order[0]]
    return best, minimizers


def gamma_i(model: CompositeUtility, x_i: np.ndarray, point: DualPoint, cfg: SolverConfig):
    """Single-sample inner minimization; returns (value, attaining x)."""
    X = model.space.require_inside(x_i)
    cache = build_cache(model, X, cfg)
    vals, mins = _gamma_all(model, cache, point.lam, point.alpha, want_argmin=True)
    return float(vals[0]), mins[0]


def dual_objective(
    model: CompositeUtility,
    data: Dataset,
    r: float,
    eps: float,
    point: DualPoint,
    cfg: SolverConfig,
    cache: SolverCache = None,
) -> float:
    """lambda*r - alpha*eps + mean of the per-sample inner minima."""
    if eps < 0:
        raise ValidationError("eps must be nonnegative")
    if cache is None:
        cache = build_cache(model, data.X, cfg)
    vals, _ = _gamma_all(model, cache, point.lam, point.alpha)
    return point.lam * r - point.alpha * eps + float(np.mean(vals))


def _line_max(f, lo: float, hi: float, tol: float):
    """Maximize a unimodal function on [lo, hi]: Brent's bounded search
    (golden section with parabolic interpolation steps)."""
    if hi - lo <= tol:
        mid = 0.5 * (lo + hi)
        return mid, f(mid)
    from scipy.optimize import minimize_scalar

    res = minimize_scalar(lambda t: -f(t), bounds=(lo, hi), method="bounded", options={"xatol": tol})
    best_t, best_v = float(res.x), -float(res.fun)
    for t in (lo, hi):  # bounded Brent never evaluates the endpoints
        v = f(t)
        if v > best_v:
            best_t, best_v = t, v
    return best_t, best_v


def _scatter_starts(B: float, k: int) -> list:
    """Deterministic low-discrepancy restart points on the box."""
    pts = []
    g = 0.6180339887498949
    for i in range(1, k + 1):
        pts.append(((i * g) % 1.0 * B, (i * g * g) % 1.0 * B))
    return pts


def _ascend(F, start, B: float, cfg: SolverConfig, sweeps: int = None, tol_scale: float = 1e-9):
    """Coordinate ascent with line searches plus a diagonal acceleration step.

    The diagonal search along the net sweep displacement removes the zigzag
    of plain coordinate ascent on correlated concave objectives.
    """
    lam, alpha = start
    best = F(lam, alpha)
    line_tol = max(B * tol_scale, 1e-13)
    sweeps = cfg.max_outer_iters if sweeps is None else sweeps
    for _ in range(sweeps):
        lam0, alpha0 = lam, alpha
        lam, _ = _line_max(lambda t: F(t, alpha), 0.0, B, line_tol)
        alpha, val = _line_max(lambda t: F(lam, t), 0.0, B, line_tol)
        dx, dy = lam - lam0, alpha - alpha0
        if abs(dx) > 0 or abs(dy) > 0:
            t_hi, t_lo = np.inf, -np.inf
            for pos, step in ((lam, dx), (alpha, dy)):
                if step > 0:
                    t_hi = min(t_hi, (B - pos) / step)
                    t_lo = max(t_lo, (0.0 - pos) / step)
                elif step < 0:
                    t_hi = min(t_hi, (0.0 - pos) / step)
                    t_lo = max(t_lo, (B - pos) / step)
            if t_hi > t_lo:
                t, val = _line_max(lambda t: F(lam + t * dx, alpha + t * dy), t_lo, t_hi, 1e-9)
                lam = min(max(lam + t * dx, 0.0), B)
                alpha = min(max(alpha + t * dy, 0.0), B)
        gain = val - best
        best = max(best, val)
        if gain < cfg.outer_tol:
            break
    return (lam, alpha), best


def _maximize_on_box(F, B: float, cfg: SolverConfig):
    cache = {}

    def Fm(lam, alpha):
        key = (lam, alpha)
        if key not in cache:
            cache[key] = F(lam, alpha)
        return cache[key]

    # multiscale grid seed
    axis = np.linspace(0.0, B, 7)
    pts = [(la, al) for la in axis for al in axis]
    vals = [Fm(la, al) for la, al in pts]
    j = int(np.argmax(vals))
    center, best_pt, best_val = pts[j], pts[j], vals[j]
    window = B
    for _ in range(2):
        window *= 0.35
        lo0 = min(max(center[0] - window / 2, 0.0), B - window)
        lo1 = min(max(center[1] - window / 2, 0.0), B - window)
        pts = [(la, al) for la in np.linspace(lo0, lo0 + window, 5) for al in np.linspace(lo1, lo1 + window, 5)]
        fv = [Fm(la, al) for la, al in pts]
        j = int(np.argmax(fv))
        center = pts[j]
        if fv[j] > best_val:
            best_pt, best_val = pts[j], fv[j]
    # cheap preliminary pass over scattered restarts, then a full ascent from the winner
    candidates = [(best_val, best_pt)]
    for s in _scatter_starts(B, cfg.restarts):
        pt, val = _ascend(Fm, s, B, cfg, sweeps=2, tol_scale=1e-4)
        candidates.append((val, pt))
    candidates.sort(key=lambda c: -c[0])
    overall_pt, overall_val = _ascend(Fm, candidates[0][1], B, cfg)
    if 0.0 > overall_val:  # origin always yields 0
        overall_pt, overall_val = (0.0, 0.0), 0.0
    return overall_pt, overall_val


def solve_dual(
    model: CompositeUtility,
    data: Dataset,
    r: float,
    eps: float,
    cfg: SolverConfig = None,
    raise_on_unbounded: bool = True,
    summaries: SummaryStats = None,
) -> DualSolution:
    """Maximize the dual objective over [0, B_dual]^2.

    Boundary hits trigger up to ``cfg.max_doublings`` box doublings; a
    persistent hit raises UnboundedDualError unless ``raise_on_unbounded`` is
    false, in which case the capped solution is returned flagged.
    """
    cfg = cfg or SolverConfig()
    if eps < 0:
        raise ValidationError("eps must be nonnegative")
    summaries = summaries or empirical_summaries(model, data)
    n = data.n
    if summaries.mean_M >= r and summaries.mean_gap <= eps:
        # the empirical measure is feasible: the dual objective is <= 0 everywhere
        # (evaluate each inner problem at x = X_i) and equals 0 at the origin.
        return DualSolution(
            value=0.0,
            statistic=0.0,
            argmax=DualPoint(0.0, 0.0),
            inner_minimizers=np.array(data.X, copy=True),
            boundary_hit=False,
            b_dual_final=cfg.B_dual,
        )

    cache = build_cache(model, data.X, cfg)

    def F(lam, alpha):
        vals, _ = _gamma_all(model, cache, lam, alpha)
        return lam * r - alpha * eps + float(np.mean(vals))

    B = cfg.B_dual
    doublings = 0
    while True:
        (lam, alpha), val = _maximize_on_box(F, B, cfg)
        hit = max(lam, alpha) >= B * (1.0 - BOUNDARY_REL_TOL)
        if not hit or doublings >= cfg.max_doublings:
            break
        doublings += 1
        B *= 2.0
        warnings.warn(
            f"dual argmax touched the multiplier box; doubling B to {B:g}",
            BoundaryHitWarning,
            stacklevel=2,
        )
    if hit and raise_on_unbounded and cfg.max_doublings > 0:
        raise UnboundedDualError(
            f"dual ascent still on the boundary after {doublings} doublings (B={B:g}); "
            "the alternative is far from feasibility or no fair utility-attaining point exists"
        )
    value = max(val, 0.0)
    _, minimizers = _gamma_all(model, cache, lam, alpha, want_argmin=True)
    return DualSolution(
        value=value,
        statistic=n * value,
        argmax=DualPoint(lam, alpha),
        inner_minimizers=minimizers,
        boundary_hit=bool(hit),
        b_dual_final=B,
        doublings=doublings,
        n_evaluations=cache.n_evaluations,
    )
