"""End-to-end test orchestration: precondition checks, statistic, decision."""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .bootstrap import BootstrapConfig, bound_distribution
from .dual import SolverConfig, solve_dual
from .exceptions import AssumptionViolationError, ValidationError
from .models import CompositeUtility, Dataset, check_gradient, empirical_summaries

SCHEMA_VERSION = "1"
WITNESS_GAP_TOL = 1e-6


@dataclass(frozen=True)
class TestConfig:
    r: float
    eps: float
    alpha_level: float = 0.05
    solver: SolverConfig = field(default_factory=SolverConfig)
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)

    def __post_init__(self):
        if self.eps < 0:
            raise ValidationError("eps must be nonnegative")
        if not (0.0 < self.alpha_level < 1.0):
            raise ValidationError("alpha_level must lie in (0, 1)")


@dataclass(frozen=True)
class AssumptionReport:
    ok: bool
    witness: np.ndarray | None
    violations: list
    details: dict


@dataclass
class TestReport:
    statistic: float
    critical_value: float
    reject: bool
    dual_lambda: float
    dual_alpha: float
    boundary_hit: bool
    mean_utility: float
    mean_gap: float
    feasibility_witness: list
    warnings: list
    timings: dict
    config: dict
    seed: int
    n: int
    dim: int
    schema_version: str = SCHEMA_VERSION

    def to_dict(self, include_timings: bool = False) -> dict:
        return {
            "schema_version": self.schema_version,
            "kind": "test-report",
            "n": self.n,
            "dim": self.dim,
            "seed": self.seed,
            "statistic": self.statistic,
            "critical_value": self.critical_value,
            "reject": self.reject,
            "dual": {
                "lambda": self.dual_lambda,
                "alpha": self.dual_alpha,
                "boundary_hit": self.boundary_hit,
            },
            "empirical": {
                "mean_utility": self.mean_utility,
                "mean_gap": self.mean_gap,
            },
            "feasibility_witness": self.feasibility_witness,
            "warnings": self.warnings,
            "timings": dict(self.timings) if include_timings else {},
            "config": self.config,
        }


def _polish_gap(model: CompositeUtility, starts: np.ndarray, iters: int = 60) -> np.ndarray:
    """Projected gradient descent on the squared gap from several starts."""
    x = np.array(starts, copy=True)
    step = 0.25
    for _ in range(iters):
        gap = model.gap(x)
        sgn = np.sign(model.policy.pi(x, 1) - model.policy.pi(x, 0))
        grad = 2.0 * (gap * sgn)[:, None] * model.gap_gradient(x)
        x_new = model.space.clip(x - step * grad)
        if np.max(np.abs(x_new - x)) < 1e-12:
            break
        x = x_new
    return x


def check_assumptions(model: CompositeUtility, data: Dataset, r: float) -> AssumptionReport:
    """Boundedness, differentiability, and fair-point feasibility checks.

    The feasibility check searches the box (lattice plus gap-descent polish)
    for a point with |pi_1 - pi_0| <= 1e-6 whose composite utility reaches r.
    Violations are returned as data, never raised.
    """
    violations = []
    details = {}

    if np.any(data.y < 0) or np.any(data.y > data.outcome_bound):
        violations.append(
            {
                "code": "boundedness",
                "message": f"outcomes leave [0, {data.outcome_bound}]",
            }
        )

    rng = np.random.default_rng(0)
    grad_err = check_gradient(model.value, model.gradient, model.space, rng, n_probes=16)
    details["composite_gradient_rel_err"] = grad_err
    if grad_err > 1e-4:
        violations.append(
            {
                "code": "differentiability",
                "message": f"composite gradient fails finite-difference check (rel err {grad_err:.2e})",
            }
        )

    grid = model.space.lattice(65 if model.space.dim <= 2 else 17)
    gaps = model.gap(grid)
    utils = model.value(grid)
    candidates = grid[np.argsort(gaps)[:8]]
    polished = _polish_gap(model, candidates)
    all_pts = np.vstack([grid, polished])
    all_gaps = np.concatenate([gaps, model.gap(polished)])
    all_utils = np.concatenate([utils, model.value(polished)])
    fair = all_gaps <= WITNESS_GAP_TOL
    details["min_gap_found"] = float(np.min(all_gaps))
    witness = None
    if np.any(fair):
        best = np.argmax(np.where(fair, all_utils, -np.inf))
        details["max_utility_on_fair_set"] = float(all_utils[best])
        if all_utils[best] >= r:
            witness = all_pts[best]
        else:
            violations.append(
                {
                    "code": "fair-point-feasibility",
                    "message": (
                        f"no fair point reaches utility {r:g} "
                        f"(best fair utility {all_utils[best]:.6g}); the dual may be unbounded"
                    ),
                }
            )
    else:
        violations.append(
            {
                "code": "fair-point-feasibility",
                "message": f"no point with gap <= {WITNESS_GAP_TOL:g} found (min gap {np.min(all_gaps):.3g})",
            }
        )
    return AssumptionReport(ok=not violations, witness=witness, violations=violations, details=details)


def run_test(model: CompositeUtility, data: Dataset, config: TestConfig, seed: int = 0) -> TestReport:
    """Full audit: precondition gate, statistic, critical value, decision.

    Raises AssumptionViolationError when the precondition checks fail, since
    the dual supremum may then be unbounded and the test meaningless.
    """
    timings = {}
    captured = []

    t0 = time.perf_counter()
    assumptions = check_assumptions(model, data, config.r)
    timings["assumptions"] = time.perf_counter() - t0
    if not assumptions.ok:
        raise AssumptionViolationError(assumptions)

    summaries = empirical_summaries(model, data)

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        t0 = time.perf_counter()
        sol = solve_dual(model, data, config.r, config.eps, config.solver, raise_on_unbounded=True)
        timings["dual"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        vals, info = bound_distribution(model, data, config.bootstrap)
        eta = float(np.quantile(vals, 1.0 - config.alpha_level))
        timings["bootstrap"] = time.perf_counter() - t0
    captured.extend(sorted({f"{w.category.__name__}: {w.message}" for w in caught}))
    sat = float(np.mean(info["saturated"]))
    if sat > 0:
        captured.append(f"bound saturated at the multiplier cap in {sat:.1%} of draws")

    return TestReport(
        statistic=sol.statistic,
        critical_value=eta,
        reject=bool(sol.statistic > eta),
        dual_lambda=sol.argmax.lam,
        dual_alpha=sol.argmax.alpha,
        boundary_hit=sol.boundary_hit,
        mean_utility=summaries.mean_M,
        mean_gap=summaries.mean_gap,
        feasibility_witness=[float(v) for v in assumptions.witness],
        warnings=captured,
        timings=timings,
        config={
            "r": config.r,
            "eps": config.eps,
            "alpha_level": config.alpha_level,
            "solver": {
                "B_dual": config.solver.B_dual,
                "inner_grid": config.solver.inner_grid,
                "inner_tol": config.solver.inner_tol,
                "outer_tol": config.solver.outer_tol,
                "max_outer_iters": config.solver.max_outer_iters,
                "restarts": config.solver.restarts,
                "max_doublings": config.solver.max_doublings,
            },
            "bootstrap": {
                "draws": config.bootstrap.draws,
                "fp_tol": config.bootstrap.fp_tol,
                "fp_max_iters": config.bootstrap.fp_max_iters,
                "damping": config.bootstrap.damping,
                "ridge": config.bootstrap.ridge,
                "seed": config.bootstrap.seed,
                "zeta_cap": config.bootstrap.zeta_cap,
                "use_joint_cov": config.bootstrap.use_joint_cov,
            },
        },
        seed=seed,
        n=data.n,
        dim=data.dim,
    )
