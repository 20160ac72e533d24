"""Critical values from the limiting distribution of the scaled statistic.

Per Gaussian draw w = (utility fluctuation, gap fluctuation) the bound is

    max over branches b of   sup_{zeta in [0, cap]^2}  zeta.w - (1/4) zeta' A_b(zeta) zeta

where A_b(zeta) is the 2x2 Gram matrix of the per-sample gradient blocks
averaged over the samples whose branch indicator holds at zeta:

    plus:   blocks (DM, -Dgap),  indicator  zeta . (DM.Dgap, -|Dgap|^2) >= 0
    minus:  blocks (DM, +Dgap),  indicator  zeta . (DM.Dgap, +|Dgap|^2) <  0

The indicators are 0-homogeneous, so the quadrant splits into finitely many
angular cones with constant active set; on each cone the objective is a fixed
concave quadratic, maximized in closed form over cone-and-box polygons.  That
enumeration is exact.  The damped fixed-point iteration

    zeta <- (1 - damping) zeta + damping * max(2 (A(zeta) + ridge I)^{-1} w, 0)

is run per draw and its value is used whenever it converges to a verified
first-order optimum inside the cap; otherwise the enumeration value is used.
The multiplier cap mirrors the compact box the dual solver works on: without
it the supremum is infinite along the fairness axis for every model.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateScoreWarning, NumericError, ValidationError
from .models import CompositeUtility, Dataset, empirical_summaries

RIGHT_ANGLE = math.pi / 2.0
COND_LIMIT = 1e12


@dataclass(frozen=True)
class BootstrapConfig:
    draws: int = 10000
    fp_tol: float = 1e-8
    fp_max_iters: int = 500
    damping: float = 0.5
    ridge: float = 1e-8
    seed: int = 0
    zeta_cap: float = 20.0
    use_joint_cov: bool = False

    def __post_init__(self):
        if self.draws < 100:
            raise ValidationError("draws must be at least 100")
        if not (0.0 < self.damping <= 1.0):
            raise ValidationError("damping must lie in (0, 1]")
        if self.zeta_cap <= 0:
            raise ValidationError("zeta_cap must be positive")


@dataclass(frozen=True)
class ScoreVectors:
    """Per-sample gradient blocks of the composite utility and the signed gap."""

    util_grad: np.ndarray  # (N, d): gradient of M at X_i
    gap_grad: np.ndarray  # (N, d): gradient of pi_1 - pi_0 at X_i

    def __post_init__(self):
        if not (np.all(np.isfinite(self.util_grad)) and np.all(np.isfinite(self.gap_grad))):
            bad = int(np.flatnonzero(~np.all(np.isfinite(self.util_grad), axis=1) | ~np.all(np.isfinite(self.gap_grad), axis=1))[0])
            raise NumericError(f"non-finite gradient at sample {bad}")

    @property
    def n(self) -> int:
        return self.util_grad.shape[0]

    @property
    def g11(self) -> np.ndarray:
        return np.sum(self.util_grad**2, axis=1)

    @property
    def g12(self) -> np.ndarray:
        return np.sum(self.util_grad * self.gap_grad, axis=1)

    @property
    def g22(self) -> np.ndarray:
        return np.sum(self.gap_grad**2, axis=1)

    @property
    def s_plus(self) -> np.ndarray:
        return np.hstack([self.util_grad, -self.gap_grad])

    @property
    def s_minus(self) -> np.ndarray:
        return np.hstack([self.util_grad, self.gap_grad])

    @property
    def v_plus(self) -> np.ndarray:
        return np.stack([self.g12, -self.g22], axis=1)

    @property
    def v_minus(self) -> np.ndarray:
        return np.stack([self.g12, self.g22], axis=1)


@dataclass(frozen=True)
class FixedPointResult:
    zeta: np.ndarray
    residual: float
    iterations: int
    converged: bool


def build_scores(model: CompositeUtility, data: Dataset) -> ScoreVectors:
    return ScoreVectors(util_grad=model.gradient(data.X), gap_grad=model.gap_gradient(data.X))


def _active_mask(scores: ScoreVectors, u0: float, u1: float, branch: str) -> np.ndarray:
    if branch == "plus":
        return u0 * scores.g12 - u1 * scores.g22 >= 0.0
    if branch == "minus":
        return u0 * scores.g12 + u1 * scores.g22 < 0.0
    raise ValidationError(f"unknown branch {branch!r}")


def _gram_of(scores: ScoreVectors, mask: np.ndarray, branch: str) -> tuple:
    n = scores.n
    sgn = -1.0 if branch == "plus" else 1.0
    a11 = float(np.sum(scores.g11[mask])) / n
    a12 = sgn * float(np.sum(scores.g12[mask])) / n
    a22 = float(np.sum(scores.g22[mask])) / n
    return a11, a12, a22


def moment_matrix(scores: ScoreVectors, zeta: np.ndarray, branch: str) -> np.ndarray:
    """Sample average of the indicator-weighted 2x2 Gram matrix (no ridge)."""
    zeta = np.asarray(zeta, dtype=float)
    if zeta.shape != (2,) or np.any(zeta < 0):
        raise ValidationError("zeta must be a nonnegative 2-vector")
    mask = _active_mask(scores, zeta[0], zeta[1], branch)
    a11, a12, a22 = _gram_of(scores, mask, branch)
    return np.array([[a11, a12], [a12, a22]])


def weighted_moment_matrix(scores: ScoreVectors, zeta: np.ndarray, branch: str, ridge: float) -> np.ndarray:
    """Inverse of the ridged indicator-weighted Gram matrix.

    The conditioning of the pre-ridge matrix is checked; past 1e12 the
    direction is reported as degenerate (the caller treats the branch as
    cap-saturated rather than inverting noise).
    """
    A = moment_matrix(scores, zeta, branch)
    eigs = np.linalg.eigvalsh(A)
    if eigs[0] <= 0 or eigs[1] / max(eigs[0], 1e-300) > COND_LIMIT:
        warnings.warn(
            f"{branch}-branch moment matrix is singular or ill-conditioned (eigs {eigs.tolist()})",
            DegenerateScoreWarning,
            stacklevel=2,
        )
    return np.linalg.inv(A + ridge * np.eye(2))


class _BranchStructure:
    """Angular decomposition of the quadrant for one branch.

    Regions are the axis rays, every indicator-boundary ray, and the open
    arcs between consecutive boundaries; each carries its own Gram triple.
    """

    def __init__(self, scores: ScoreVectors, branch: str):
        self.branch = branch
        g12, g22 = scores.g12, scores.g22
        if branch == "plus":
            sel = (g12 > 0) & (g22 > 0)
            raw = np.stack([g22[sel], g12[sel]], axis=1)
        else:
            sel = (g12 < 0) & (g22 > 0)
            raw = np.stack([g22[sel], -g12[sel]], axis=1)
        angles = np.arctan2(raw[:, 1], raw[:, 0]) if raw.size else np.empty(0)
        order = np.argsort(angles)
        angles = angles[order]
        raw = raw[order] if raw.size else raw
        keep = np.ones(angles.shape[0], dtype=bool)
        keep[1:] = np.diff(angles) > 0
        self.node_angles = angles[keep]  # interior boundary angles, sorted
        node_raw = raw[keep] if raw.size else raw

        # rays: lambda-axis, each boundary, alpha-axis
        ray_dirs = [(1.0, 0.0)]
        ray_raw = [(1.0, 0.0)]
        for k in range(self.node_angles.shape[0]):
            u = node_raw[k] / np.linalg.norm(node_raw[k])
            ray_dirs.append((float(u[0]), float(u[1])))
            ray_raw.append((float(node_raw[k, 0]), float(node_raw[k, 1])))
        ray_dirs.append((0.0, 1.0))
        ray_raw.append((0.0, 1.0))
        self.ray_dirs = np.asarray(ray_dirs)
        self.ray_grams = np.asarray(
            [_gram_of(scores, _active_mask(scores, r0, r1, branch), branch) for r0, r1 in ray_raw]
        )

        bounds = np.concatenate([[0.0], self.node_angles, [RIGHT_ANGLE]])
        self.arc_lo = bounds[:-1]
        self.arc_hi = bounds[1:]
        mids = 0.5 * (self.arc_lo + self.arc_hi)
        self.arc_grams = np.asarray(
            [
                _gram_of(scores, _active_mask(scores, math.cos(t), math.sin(t), branch), branch)
                for t in mids
            ]
        )
        self.full_gram = _gram_of(scores, np.ones(scores.n, dtype=bool), branch)

    def gram_at(self, z0: np.ndarray, z1: np.ndarray) -> np.ndarray:
        """Gram triples for a batch of points, shape (D, 3).

        Exact on the axes; interior boundary hits fall into the upper arc
        (measure zero, only used by the iterative route).
        """
        z0 = np.atleast_1d(z0)
        z1 = np.atleast_1d(z1)
        out = np.empty((z0.shape[0], 3))
        ang = np.arctan2(z1, z0)
        idx = np.searchsorted(self.node_angles, ang, side="right")
        out[:] = self.arc_grams[np.clip(idx, 0, self.arc_grams.shape[0] - 1)]
        on_lam = (z1 == 0.0) & (z0 > 0.0)
        on_alp = (z0 == 0.0) & (z1 > 0.0)
        origin = (z0 == 0.0) & (z1 == 0.0)
        out[on_lam] = self.ray_grams[0]
        out[on_alp] = self.ray_grams[-1]
        if self.branch == "plus":
            out[origin] = self.full_gram
        else:
            out[origin] = 0.0
        return out


def _quad_on_segment(p, q, gram, W):
    """Max of zeta.w - 1/4 zeta'A zeta on segment [p, q]; returns (vals, degenerate_flag)."""
    a11, a12, a22 = gram
    dx, dy = q[0] - p[0], q[1] - p[1]
    Ad = (a11 * dx + a12 * dy, a12 * dx + a22 * dy)
    Ap = (a11 * p[0] + a12 * p[1], a12 * p[0] + a22 * p[1])
    c2 = -0.25 * (dx * Ad[0] + dy * Ad[1])
    c1 = dx * W[0] + dy * W[1] - 0.5 * (dx * Ap[0] + dy * Ap[1])
    c0 = p[0] * W[0] + p[1] * W[1] - 0.25 * (p[0] * Ap[0] + p[1] * Ap[1])
    if c2 < -1e-300:
        t = np.clip(-c1 / (2.0 * c2), 0.0, 1.0)
        return c0 + c1 * t + c2 * t * t, False
    return c0 + np.maximum(c1, 0.0), True


def _ray_max(u, gram, t_max, W):
    """Max along t*u for t in [0, t_max]; returns (vals, degenerate_flag)."""
    a11, a12, a22 = gram
    a = u[0] * (a11 * u[0] + a12 * u[1]) + u[1] * (a12 * u[0] + a22 * u[1])
    s = u[0] * W[0] + u[1] * W[1]
    if a > 1e-300:
        t = np.clip(2.0 * s / a, 0.0, t_max)
        return t * s - 0.25 * a * t * t, False
    return t_max * np.maximum(s, 0.0), True


class BoundComputation:
    """Reusable machinery for bound values over many Gaussian draws."""

    def __init__(self, scores: ScoreVectors, cfg: BootstrapConfig):
        self.scores = scores
        self.cfg = cfg
        self.structures = {b: _BranchStructure(scores, b) for b in ("plus", "minus")}

    # -- exact enumeration ------------------------------------------------

    def branch_sup(self, branch: str, W: np.ndarray):
        """Exact sup over [0, cap]^2 for one branch; W has shape (2, D).

        Returns (vals, vals_nondegenerate): the second maximum excludes
        zero-curvature candidates, so vals > vals_nd flags cap saturation.
        """
        st = self.structures[branch]
        cap = self.cfg.zeta_cap
        D = W.shape[1]
        vals = np.zeros(D)
        vals_nd = np.zeros(D)

        def absorb(v, degen):
            nonlocal vals, vals_nd
            np.maximum(vals, v, out=vals)
            if not degen:
                np.maximum(vals_nd, v, out=vals_nd)

        for u, gram in zip(st.ray_dirs, st.ray_grams):
            t_max = cap / max(u[0], u[1])
            absorb(*_ray_max(u, gram, t_max, W))

        n_arcs = st.arc_lo.shape[0]
        for k in range(n_arcs):
            lo, hi = st.arc_lo[k], st.arc_hi[k]
            if hi - lo <= 0:
                continue
            gram = st.arc_grams[k]
            a11, a12, a22 = gram
            u_lo = np.array([math.cos(lo), math.sin(lo)])
            u_hi = np.array([math.cos(hi), math.sin(hi)])
            det = a11 * a22 - a12 * a12
            if det > 1e-300 and a11 > 0:
                y0 = 2.0 * (a22 * W[0] - a12 * W[1]) / det
                y1 = 2.0 * (-a12 * W[0] + a11 * W[1]) / det
                inside = (
                    (u_lo[0] * y1 - u_lo[1] * y0 > 0)
                    & (y0 * u_hi[1] - y1 * u_hi[0] > 0)
                    & (y0 <= cap)
                    & (y1 <= cap)
                )
                val = 0.5 * (W[0] * y0 + W[1] * y1)
                absorb(np.where(inside, val, 0.0), False)
            # cone edges with this arc's active set
            for u in (u_lo, u_hi):
                t_max = cap / max(u[0], u[1])
                absorb(*_ray_max(u, gram, t_max, W))
            # box boundary between the two cone-edge exits
            p_lo = u_lo * (cap / max(u_lo[0], u_lo[1]))
            p_hi = u_hi * (cap / max(u_hi[0], u_hi[1]))
            corner = np.array([cap, cap])
            if hi <= math.pi / 4.0 + 1e-15 or lo >= math.pi / 4.0 - 1e-15:
                absorb(*_quad_on_segment(p_lo, p_hi, gram, W))
            else:
                absorb(*_quad_on_segment(p_lo, corner, gram, W))
                absorb(*_quad_on_segment(corner, p_hi, gram, W))
        return vals, vals_nd

    def phi(self, branch: str, zeta: np.ndarray, W: np.ndarray) -> np.ndarray:
        """Exact objective zeta.w - 1/4 zeta'A(zeta) zeta, batched (2, D)."""
        st = self.structures[branch]
        g = st.gram_at(zeta[0], zeta[1])
        quad = (
            zeta[0] * (g[:, 0] * zeta[0] + g[:, 1] * zeta[1])
            + zeta[1] * (g[:, 1] * zeta[0] + g[:, 2] * zeta[1])
        )
        return zeta[0] * W[0] + zeta[1] * W[1] - 0.25 * quad

    # -- damped fixed-point route -----------------------------------------

    def fixed_point_batch(self, branch: str, W: np.ndarray):
        """Run the damped clamp iteration for every draw simultaneously."""
        st = self.structures[branch]
        cfg = self.cfg
        D = W.shape[1]
        zeta = np.zeros((2, D))
        iters = np.zeros(D, dtype=int)
        frozen = (W[0] <= 0) & (W[1] <= 0)  # clamp at the origin immediately
        iters[frozen] = 1
        runaway = np.zeros(D, dtype=bool)
        delta = cfg.ridge

        def map_step(z):
            g = st.gram_at(z[0], z[1])
            det = (g[:, 0] + delta) * (g[:, 2] + delta) - g[:, 1] ** 2
            y0 = 2.0 * ((g[:, 2] + delta) * W[0] - g[:, 1] * W[1]) / det
            y1 = 2.0 * (-g[:, 1] * W[0] + (g[:, 0] + delta) * W[1]) / det
            return np.maximum(np.stack([y0, y1]), 0.0)

        active = ~frozen
        it = 0
        while np.any(active) and it < cfg.fp_max_iters:
            it += 1
            za = zeta[:, active]
            y = map_step(za)
            z_new = (1.0 - cfg.damping) * za + cfg.damping * y
            moved = np.max(np.abs(z_new - za), axis=0)
            zeta[:, active] = z_new
            idx = np.flatnonzero(active)
            done = moved < cfg.fp_tol
            far = (np.max(z_new, axis=0) > 10.0 * cfg.zeta_cap) & (np.max(y, axis=0) > 10.0 * cfg.zeta_cap)
            iters[idx[done | far]] = it
            runaway[idx[far & ~done]] = True
            active[idx[done | far]] = False
        iters[active] = cfg.fp_max_iters

        y_final = map_step(zeta)
        residual = np.max(np.abs(zeta - y_final), axis=0)
        residual[frozen] = 0.0
        res_ok = (residual < cfg.fp_tol) & ~runaway

        # first-order optimality of the capped problem at zeta (pre-ridge Gram)
        g = st.gram_at(zeta[0], zeta[1])
        grad0 = W[0] - 0.5 * (g[:, 0] * zeta[0] + g[:, 1] * zeta[1])
        grad1 = W[1] - 0.5 * (g[:, 1] * zeta[0] + g[:, 2] * zeta[1])
        tol = 1e-6 * np.maximum(1.0, np.max(np.abs(W), axis=0))
        kkt0 = np.where(zeta[0] > 1e-12, np.abs(grad0) <= tol, grad0 <= tol)
        kkt1 = np.where(zeta[1] > 1e-12, np.abs(grad1) <= tol, grad1 <= tol)
        inside = np.max(zeta, axis=0) <= cfg.zeta_cap * (1.0 - 1e-9)
        converged = res_ok & kkt0 & kkt1 & inside
        return zeta, residual, iters, converged

    # -- combination --------------------------------------------------------

    def bound_values(self, W: np.ndarray):
        """Bound per draw plus diagnostics; W has shape (2, D)."""
        D = W.shape[1]
        total = np.zeros(D)
        total_nd = np.zeros(D)
        fp_used = np.zeros(D, dtype=bool)
        for branch in ("plus", "minus"):
            vals, vals_nd = self.branch_sup(branch, W)
            zeta, _, _, converged = self.fixed_point_batch(branch, W)
            if np.any(converged):
                fp_vals = self.phi(branch, zeta[:, converged], W[:, converged])
                vals = vals.copy()
                vals[converged] = np.maximum(fp_vals, 0.0)
                fp_used |= converged
            np.maximum(total, vals, out=total)
            np.maximum(total_nd, vals_nd, out=total_nd)
        saturated = total > total_nd + 1e-12 * np.maximum(1.0, total)
        return total, {"saturated": saturated, "fp_used": fp_used}


def solve_fixed_point(scores: ScoreVectors, w_draw: np.ndarray, branch: str, cfg: BootstrapConfig) -> FixedPointResult:
    """Damped clamp iteration for a single draw."""
    w = np.asarray(w_draw, dtype=float).reshape(2, 1)
    if not np.all(np.isfinite(w)):
        raise NumericError("w_draw must be finite")
    bc = BoundComputation(scores, cfg)
    zeta, residual, iters, converged = bc.fixed_point_batch(branch, w)
    return FixedPointResult(
        zeta=zeta[:, 0].copy(),
        residual=float(residual[0]),
        iterations=int(iters[0]),
        converged=bool(converged[0]),
    )


def compute_bound(scores: ScoreVectors, w_draw: np.ndarray, cfg: BootstrapConfig) -> float:
    """Bound value for a single draw (fixed point when valid, else enumeration)."""
    w = np.asarray(w_draw, dtype=float).reshape(2, 1)
    bc = BoundComputation(scores, cfg)
    vals, _ = bc.bound_values(w)
    return float(vals[0])


def draw_fluctuations(summaries, data_values: tuple, cfg: BootstrapConfig) -> np.ndarray:
    """Gaussian draws of the (utility, gap) fluctuations, shape (2, draws).

    Uses a counter-based generator so the whole block is reproducible
    independent of scheduling.  ``data_values`` carries (M(X_i), gap(X_i))
    for the optional joint-covariance mode.
    """
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    Z = rng.standard_normal((2, cfg.draws))
    if cfg.use_joint_cov:
        stacked = np.stack(data_values)
        cov = np.cov(stacked, ddof=1)
        cov = cov + 1e-15 * np.eye(2)
        L = np.linalg.cholesky(cov)
        return L @ Z
    sds = np.array([math.sqrt(max(summaries.var_M, 0.0)), math.sqrt(max(summaries.var_gap, 0.0))])
    return Z * sds[:, None]


def bound_distribution(model: CompositeUtility, data: Dataset, cfg: BootstrapConfig):
    """All bootstrap bound values plus diagnostics."""
    summaries = empirical_summaries(model, data)
    scores = build_scores(model, data)
    if summaries.var_M == 0.0 and summaries.var_gap == 0.0:
        warnings.warn("degenerate Gaussian limit: both variances are zero", DegenerateScoreWarning, stacklevel=2)
        return np.zeros(cfg.draws), {"saturated": np.zeros(cfg.draws, dtype=bool), "fp_used": np.zeros(cfg.draws, dtype=bool)}
    W = draw_fluctuations(summaries, (model.value(data.X), model.gap(data.X)), cfg)
    bc = BoundComputation(scores, cfg)
    return bc.bound_values(W)


def critical_value(model: CompositeUtility, data: Dataset, alpha_level: float, cfg: BootstrapConfig) -> float:
    """(1 - alpha_level) empirical quantile of the bootstrap bound values."""
    if not (0.0 < alpha_level < 1.0):
        raise ValidationError("alpha_level must lie in (0, 1)")
    vals, _ = bound_distribution(model, data, cfg)
    return float(np.quantile(vals, 1.0 - alpha_level))
