"""Model fitting for the empirical pipeline.

Ridge-penalized logistic regression supplies propensities and group
probabilities; Nadaraya-Watson regression with Gaussian kernels supplies the
conditional utilities.  Estimators follow the familiar fit/predict surface
and every fitted object exposes analytic gradients in original units.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import EstimationError, KernelUnderflowWarning, SeparationError
from .models import Dataset

DEFAULT_REG = 1e-4
BANDWIDTH_FLOOR_FRAC = 1e-3


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class _ParamsMixin:
    """Minimal get_params/set_params so estimators compose like sklearn ones."""

    _param_names: tuple = ()

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names}

    def set_params(self, **params):
        for key, value in params.items():
            if key not in self._param_names:
                raise ValueError(f"unknown parameter {key!r}")
            setattr(self, key, value)
        return self


class RidgeLogistic(_ParamsMixin):
    """Logistic regression with a ridge penalty on all coefficients (bias included).

    Fitting is full-batch gradient descent with Armijo backtracking on the
    penalized mean log-loss; features are standardized internally and the
    exported weights act in original units.  The objective is strictly convex,
    so the minimizer is unique.
    """

    _param_names = ("reg", "tol", "max_iter")

    def __init__(self, reg: float = DEFAULT_REG, tol: float = 1e-8, max_iter: int = 5000):
        self.reg = reg
        self.tol = tol
        self.max_iter = max_iter
        self.coef_ = None
        self.intercept_ = None
        self.n_iter_ = None
        self.loss_path_ = None

    def fit(self, X: np.ndarray, y: np.ndarray, init: np.ndarray = None) -> "RidgeLogistic":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float)
        n, d = X.shape
        classes = np.unique(y)
        if len(classes) < 2:
            raise SeparationError(
                f"single-class response (all {int(classes[0])}); propensity not identifiable — "
                "consider increasing reg"
            )
        mu = X.mean(axis=0)
        sd = X.std(axis=0)
        sd = np.where(sd < 1e-12, 1.0, sd)
        Z = np.hstack([(X - mu) / sd, np.ones((n, 1))])

        def loss_grad(wv):
            z = Z @ wv
            p = sigmoid(z)
            nll = -np.mean(y * np.log(np.clip(p, 1e-300, 1.0)) + (1 - y) * np.log(np.clip(1 - p, 1e-300, 1.0)))
            val = nll + 0.5 * self.reg * float(wv @ wv)
            g = Z.T @ (p - y) / n + self.reg * wv
            return val, g

        wv = np.zeros(d + 1) if init is None else np.asarray(init, dtype=float).copy()
        val, g = loss_grad(wv)
        path = [val]
        step = 1.0
        it = 0
        for it in range(1, self.max_iter + 1):
            gnorm = float(np.linalg.norm(g))
            if gnorm < self.tol:
                break
            accepted = False
            t = min(step * 2.0, 64.0)
            for _ in range(60):
                cand = wv - t * g
                cval, cg = loss_grad(cand)
                if cval <= val - 1e-4 * t * gnorm * gnorm:
                    accepted = True
                    break
                t *= 0.5
            if not accepted:
                break
            wv, val, g, step = cand, cval, cg, t
            path.append(val)
        self.n_iter_ = it
        self.loss_path_ = np.asarray(path)
        # back to original units: w_j = w_std_j / sd_j, b = b_std - sum(w_std * mu / sd)
        self.coef_ = wv[:d] / sd
        self.intercept_ = float(wv[d] - np.sum(wv[:d] * mu / sd))
        return self

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return X @ self.coef_ + self.intercept_

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return sigmoid(self.decision_function(X))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(int)

    def proba_gradient(self, X: np.ndarray) -> np.ndarray:
        """d sigmoid(w.x + b) / dx, shape (n, d)."""
        p = self.predict_proba(X)
        return (p * (1.0 - p))[:, None] * self.coef_[None, :]


class KernelRegression(_ParamsMixin):
    """Nadaraya-Watson regression with a Gaussian product kernel.

    Per-axis bandwidths default to Silverman's rule with a floor of
    ``BANDWIDTH_FLOOR_FRAC`` of the covariate range; the prediction is the
    kernel-weighted average of training targets, so it is bounded by the
    target range and invariant to the training order.
    """

    _param_names = ("bandwidth",)

    def __init__(self, bandwidth: float | np.ndarray | None = None):
        self.bandwidth = bandwidth
        self.centers_ = None
        self.targets_ = None
        self.bandwidth_ = None

    def fit(self, X: np.ndarray, y: np.ndarray) -> "KernelRegression":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float)
        if X.shape[0] == 0:
            raise EstimationError("cannot fit kernel regression on an empty cell")
        n, d = X.shape
        span = np.maximum(X.max(axis=0) - X.min(axis=0), 1e-12)
        if self.bandwidth is None:
            sd = X.std(axis=0)
            iqr = np.subtract(*np.percentile(X, [75, 25], axis=0)) / 1.349
            spread = np.where(iqr > 0, np.minimum(sd, iqr), sd)
            h = 0.9 * spread * max(n, 2) ** (-1.0 / (4 + d))
        else:
            h = np.broadcast_to(np.asarray(self.bandwidth, dtype=float), (d,)).copy()
        self.bandwidth_ = np.maximum(h, BANDWIDTH_FLOOR_FRAC * span)
        self.centers_ = X
        self.targets_ = y
        return self

    def _log_weights(self, X: np.ndarray) -> np.ndarray:
        diff = (X[:, None, :] - self.centers_[None, :, :]) / self.bandwidth_
        return -0.5 * np.sum(diff * diff, axis=2)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        logw = self._log_weights(X)
        logw -= logw.max(axis=1, keepdims=True)
        wgt = np.exp(logw)
        alive = np.sum(wgt > 0.0, axis=1)
        if np.any(alive <= 1) and self.centers_.shape[0] > 1:
            warnings.warn(
                "kernel weights underflowed at a query; falling back to nearest-neighbour target",
                KernelUnderflowWarning,
                stacklevel=2,
            )
        denom = wgt.sum(axis=1)
        return (wgt @ self.targets_) / denom

    def predict_gradient(self, X: np.ndarray) -> np.ndarray:
        """Analytic gradient of the kernel ratio, shape (n, d)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        logw = self._log_weights(X)
        logw -= logw.max(axis=1, keepdims=True)
        wgt = np.exp(logw)
        denom = wgt.sum(axis=1)
        num = wgt @ self.targets_
        # d log K / dx = -(x - c) / h^2 per axis
        dk = -(X[:, None, :] - self.centers_[None, :, :]) / (self.bandwidth_**2)
        dnum = np.einsum("qc,qcd,c->qd", wgt, dk, self.targets_)
        ddenom = np.einsum("qc,qcd->qd", wgt, dk)
        return (dnum * denom[:, None] - num[:, None] * ddenom) / (denom**2)[:, None]


@dataclass(frozen=True)
class FittedPolicy:
    """Per-group ridge-logistic propensities."""

    models: tuple  # (group 0 fit, group 1 fit)

    def pi(self, X, a):
        return self.models[a].predict_proba(X)

    def grad_pi(self, X, a):
        return self.models[a].proba_gradient(X)


@dataclass(frozen=True)
class PrecomputedPolicy:
    """Propensities supplied as smooth functions with finite-difference gradients.

    Used when score columns ship with the data; ``fns[a]`` maps (n, d) -> (n,).
    """

    fns: tuple
    step: float

    def pi(self, X, a):
        return np.clip(np.asarray(self.fns[a](np.atleast_2d(X)), dtype=float), 0.0, 1.0)

    def grad_pi(self, X, a):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.empty_like(X)
        for j in range(X.shape[1]):
            e = np.zeros(X.shape[1])
            e[j] = self.step
            out[:, j] = (self.pi(X + e, a) - self.pi(X - e, a)) / (2.0 * self.step)
        return out


@dataclass(frozen=True)
class GroupProbability:
    """p_a(x) from a logistic fit of the group label on covariates."""

    model: RidgeLogistic

    def p(self, X, a):
        p1 = self.model.predict_proba(X)
        return p1 if a == 1 else 1.0 - p1

    def grad_p(self, X, a):
        g = self.model.proba_gradient(X)
        return g if a == 1 else -g


@dataclass(frozen=True)
class FittedUtility:
    """Kernel-regression utilities per (treatment, group) cell plus a group model."""

    cells: dict  # (w, a) -> KernelRegression
    groups: GroupProbability

    def m(self, w, X, a):
        return self.cells[(w, a)].predict(X)

    def grad_m(self, w, X, a):
        return self.cells[(w, a)].predict_gradient(X)

    def p(self, X, a):
        return self.groups.p(X, a)

    def grad_p(self, X, a):
        return self.groups.grad_p(X, a)


def fit_propensity(data: Dataset, reg: float = DEFAULT_REG) -> FittedPolicy:
    """Fit treatment-on-covariates logistic models separately per group."""
    fits = []
    for a in (0, 1):
        mask = data.s == a
        try:
            fits.append(RidgeLogistic(reg=reg).fit(data.X[mask], data.w[mask]))
        except SeparationError as exc:
            raise SeparationError(f"group s={a}: {exc}") from None
    return FittedPolicy(models=tuple(fits))


def fit_group_model(data: Dataset, reg: float = DEFAULT_REG) -> GroupProbability:
    """Fit the group-membership probability p_1(x) by ridge logistic regression."""
    return GroupProbability(model=RidgeLogistic(reg=reg).fit(data.X, data.s))


def fit_outcome(data: Dataset, bandwidth: float | None = None, reg: float = DEFAULT_REG) -> FittedUtility:
    """Fit conditional utilities on every (treatment, group) cell.

    Raises EstimationError naming the first empty cell.
    """
    cells = {}
    for w in (0, 1):
        for a in (0, 1):
            mask = (data.w == w) & (data.s == a)
            if not np.any(mask):
                raise EstimationError(f"empty estimation cell (w={w}, s={a})")
            cells[(w, a)] = KernelRegression(bandwidth=bandwidth).fit(data.X[mask], data.y[mask])
    return FittedUtility(cells=cells, groups=fit_group_model(data, reg=reg))
