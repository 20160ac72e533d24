"""Utility-constrained approximate-fairness testing via Wasserstein projections.

The test statistic is N times the squared 2-Wasserstein projection distance
from the empirical covariate measure to the set of measures that keep the
population utility above a threshold while staying within a tolerance of
strong demographic parity; the critical value is bootstrapped from the
asymptotic stochastic upper bound of the scaled statistic.
"""

from .audit import AssumptionReport, TestConfig, TestReport, check_assumptions, run_test
from .bootstrap import (
    BootstrapConfig,
    FixedPointResult,
    ScoreVectors,
    build_scores,
    compute_bound,
    critical_value,
    solve_fixed_point,
    weighted_moment_matrix,
)
from .dual import DualPoint, DualSolution, SolverConfig, dual_objective, gamma_i, solve_dual
from .estimation import (
    KernelRegression,
    RidgeLogistic,
    fit_group_model,
    fit_outcome,
    fit_propensity,
)
from .exceptions import (
    AssumptionViolationError,
    DomainError,
    EstimationError,
    FairprojError,
    NumericError,
    SeparationError,
    UnboundedDualError,
    ValidationError,
)
from .models import (
    CompositeUtility,
    CovariateSpace,
    Dataset,
    Sample,
    SummaryStats,
    empirical_summaries,
    eval_M,
    eval_gradM,
    fairness_gap,
)
from .simulation import PricingScenario, SweepResult, SweepRow, make_scenario, run_sweep

__version__ = "0.1.0"

__all__ = [
    "AssumptionReport",
    "AssumptionViolationError",
    "BootstrapConfig",
    "CompositeUtility",
    "CovariateSpace",
    "Dataset",
    "DomainError",
    "DualPoint",
    "DualSolution",
    "EstimationError",
    "FairprojError",
    "FixedPointResult",
    "KernelRegression",
    "NumericError",
    "PricingScenario",
    "RidgeLogistic",
    "Sample",
    "ScoreVectors",
    "SeparationError",
    "SolverConfig",
    "SummaryStats",
    "SweepResult",
    "SweepRow",
    "TestConfig",
    "TestReport",
    "UnboundedDualError",
    "ValidationError",
    "build_scores",
    "check_assumptions",
    "compute_bound",
    "critical_value",
    "dual_objective",
    "empirical_summaries",
    "eval_M",
    "eval_gradM",
    "fairness_gap",
    "fit_group_model",
    "fit_outcome",
    "fit_propensity",
    "gamma_i",
    "make_scenario",
    "run_sweep",
    "run_test",
    "solve_dual",
    "solve_fixed_point",
    "weighted_moment_matrix",
]
