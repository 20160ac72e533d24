"""Synthetic pricing study and multiplier-threshold sweeps.

The scenario family: click rate x ~ Unif[0,1], group share 1/2, propensities
pi_a(x) = theta_a * x with theta_0 = 1 - theta_1, conditional utilities
m_w(x, a) = b0 + b1*w + b2*x with coefficients (0.8, 0.5, 0.7) for group 0 and
(0.5, 1.0, 0.5) for group 1.  Treatments are drawn from the propensities with
randomness independent of the outcome noise (separate substreams per field).
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bootstrap import BootstrapConfig, critical_value
from .dual import SolverConfig, solve_dual
from .estimation import RidgeLogistic, sigmoid
from .exceptions import ValidationError
from .models import AnalyticPolicy, AnalyticUtility, CompositeUtility, CovariateSpace, Dataset

BETAS = {0: (0.8, 0.5, 0.7), 1: (0.5, 1.0, 0.5)}


@dataclass(frozen=True)
class PricingScenario:
    theta1: float
    n: int
    seed: int
    betas0: tuple = BETAS[0]
    betas1: tuple = BETAS[1]
    group_share: float = 0.5
    noise: float = 0.05

    def __post_init__(self):
        if not (0.0 <= self.theta1 <= 1.0):
            raise ValidationError("theta1 must lie in [0, 1]")
        if self.n < 2:
            raise ValidationError("need at least 2 samples")

    @property
    def theta0(self) -> float:
        return 1.0 - self.theta1


def pricing_model(scenario: PricingScenario) -> CompositeUtility:
    thetas = (scenario.theta0, scenario.theta1)
    betas = {0: scenario.betas0, 1: scenario.betas1}
    share = scenario.group_share

    def pi_fn(X, a):
        return thetas[a] * np.atleast_2d(X)[:, 0]

    def grad_pi_fn(X, a):
        X = np.atleast_2d(X)
        g = np.zeros_like(X)
        g[:, 0] = thetas[a]
        return g

    def m_fn(w, X, a):
        b0, b1, b2 = betas[a]
        return b0 + b1 * w + b2 * np.atleast_2d(X)[:, 0]

    def grad_m_fn(w, X, a):
        X = np.atleast_2d(X)
        g = np.zeros_like(X)
        g[:, 0] = betas[a][2]
        return g

    def p_fn(X, a):
        X = np.atleast_2d(X)
        return np.full(X.shape[0], share if a == 1 else 1.0 - share)

    def grad_p_fn(X, a):
        return np.zeros_like(np.atleast_2d(X))

    space = CovariateSpace(lower=[0.0], upper=[1.0])
    return CompositeUtility(
        policy=AnalyticPolicy(pi_fn=pi_fn, grad_pi_fn=grad_pi_fn),
        utility=AnalyticUtility(m_fn=m_fn, grad_m_fn=grad_m_fn, p_fn=p_fn, grad_p_fn=grad_p_fn),
        space=space,
    )


def make_scenario(theta1: float, n: int, seed: int, **kwargs):
    """Analytic model plus a simulated dataset; deterministic given the seed."""
    scenario = PricingScenario(theta1=theta1, n=n, seed=seed, **kwargs)
    model = pricing_model(scenario)
    streams = [np.random.Generator(np.random.Philox(s)) for s in np.random.SeedSequence(seed).spawn(4)]
    x = streams[0].uniform(0.0, 1.0, size=(n, 1))
    s = (streams[1].uniform(size=n) < scenario.group_share).astype(int)
    pi_s = np.where(s == 1, scenario.theta1, scenario.theta0) * x[:, 0]
    w = (streams[2].uniform(size=n) < pi_s).astype(int)
    mean_y = np.array([model.utility.m(int(wi), xi.reshape(1, -1), int(si))[0] for wi, xi, si in zip(w, x, s)])
    y = np.maximum(mean_y + streams[3].uniform(-scenario.noise, scenario.noise, size=n), 0.0)
    data = Dataset(X=x, s=s, w=w, y=y, space=model.space)
    return model, data


@dataclass(frozen=True)
class SweepRow:
    theta1: float
    r: float
    eps: float
    statistic: float
    critical_value: float
    reject: bool
    runtime: float
    boundary_hit: bool
    status: str = "ok"


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)
    alpha_level: float = 0.05
    n: int = 0
    seed: int = 0

    def rejections(self) -> int:
        return sum(1 for row in self.rows if row.status == "ok" and row.reject)


def _theta_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def run_sweep(
    thetas: list,
    rs: list,
    epss: list,
    n: int,
    alpha_level: float,
    seed: int,
    solver_cfg: SolverConfig = None,
    boot_cfg: BootstrapConfig = None,
    threads: int = 1,
) -> SweepResult:
    """One row per (theta1, r, eps) cell.

    Every cell of one theta shares the scenario and the bootstrap critical
    value (the bound does not depend on the thresholds).  All cells share a
    single multiplier box (no doubling) so the threshold monotonicities are
    exact; failed cells record an error row without aborting the sweep.
    """
    if not (thetas and rs and epss):
        raise ValidationError("thetas, rs and epss must be nonempty")
    solver_cfg = solver_cfg or SolverConfig()
    solver_cfg = SolverConfig(
        B_dual=solver_cfg.B_dual,
        inner_grid=solver_cfg.inner_grid,
        inner_tol=solver_cfg.inner_tol,
        outer_tol=solver_cfg.outer_tol,
        max_outer_iters=solver_cfg.max_outer_iters,
        restarts=solver_cfg.restarts,
        max_doublings=0,
    )
    boot_cfg = boot_cfg or BootstrapConfig()

    scenarios = []
    for k, theta in enumerate(thetas):
        model, data = make_scenario(theta, n, _theta_seed(seed, k))
        cell_boot = BootstrapConfig(
            draws=boot_cfg.draws,
            fp_tol=boot_cfg.fp_tol,
            fp_max_iters=boot_cfg.fp_max_iters,
            damping=boot_cfg.damping,
            ridge=boot_cfg.ridge,
            seed=_theta_seed(seed, 10_000 + k),
            zeta_cap=boot_cfg.zeta_cap,
            use_joint_cov=boot_cfg.use_joint_cov,
        )
        eta = critical_value(model, data, alpha_level, cell_boot)
        scenarios.append((theta, model, data, eta))

    cells = [
        (idx_t, r, eps)
        for idx_t in range(len(thetas))
        for r in rs
        for eps in epss
    ]

    def run_cell(cell):
        idx_t, r, eps = cell
        theta, model, data, eta = scenarios[idx_t]
        t0 = time.perf_counter()
        try:
            sol = solve_dual(model, data, r, eps, solver_cfg, raise_on_unbounded=False)
            return SweepRow(
                theta1=theta,
                r=r,
                eps=eps,
                statistic=sol.statistic,
                critical_value=eta,
                reject=bool(sol.statistic > eta),
                runtime=time.perf_counter() - t0,
                boundary_hit=sol.boundary_hit,
            )
        except Exception as exc:  # cell failure must not abort the sweep
            return SweepRow(
                theta1=theta,
                r=r,
                eps=eps,
                statistic=float("nan"),
                critical_value=eta,
                reject=False,
                runtime=time.perf_counter() - t0,
                boundary_hit=False,
                status=f"error: {exc}",
            )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run_cell, cells))
    else:
        rows = [run_cell(c) for c in cells]
    return SweepResult(rows=rows, alpha_level=alpha_level, n=n, seed=seed)


def make_classifier_study(reg: float, n: int, seed: int):
    """Classifier-audit table: features, group, stochastic decision, correctness.

    A ridge-logistic classifier is trained on (features, group) against labels
    that correlate with the group, then deployed as a stochastic policy; the
    recorded outcome is 1 when the sampled decision matches the label.
    Stronger ridge shrinks the group coefficient, so the deployed policy's
    group gap fades with reg.  Returns (X, s, w, y).
    """
    streams = [np.random.Generator(np.random.Philox(s)) for s in np.random.SeedSequence(seed).spawn(4)]
    X = streams[0].uniform(-1.0, 1.0, size=(n, 2))
    s = (streams[1].uniform(size=n) < 0.5).astype(int)
    logits = 1.8 * X[:, 0] - 0.9 * X[:, 1] + 2.2 * s - 1.1
    labels = (streams[2].uniform(size=n) < sigmoid(logits)).astype(int)
    feats = np.hstack([X, s[:, None].astype(float)])
    clf = RidgeLogistic(reg=reg).fit(feats, labels)
    score = clf.predict_proba(feats)
    w = (streams[3].uniform(size=n) < score).astype(int)
    y = (w == labels).astype(float)
    return X, s, w, y
