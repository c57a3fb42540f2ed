"""Linear-family fits: logistic regression by IRLS, least squares, elastic net.

All fitters take a plain feature matrix (no missing values; preprocessing has
already run) and return parameter payloads consumed by ``learners.predict``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .base import FitError


@dataclass(frozen=True)
class LogisticParams:
    intercept: float
    coef: np.ndarray
    deviance: float
    n_iter: int
    separation: bool       # any |coefficient| beyond the separation bound


@dataclass(frozen=True)
class LinearParams:
    intercept: float
    coef: np.ndarray
    residual_variance: float


@dataclass(frozen=True)
class ElasticNetParams:
    intercept: float
    coef: np.ndarray
    penalty: float
    mixture: float
    kkt_residual: float
    n_passes: int


SEPARATION_BOUND = 15.0


def _deviance(y, eta):
    p = 1.0 / (1.0 + np.exp(-eta))
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    return -2.0 * float(y @ np.log(p) + (1.0 - y) @ np.log1p(-p))


def fit_logistic(X: np.ndarray, y: np.ndarray, max_iter: int = 25,
                 tol: float = 1e-8) -> LogisticParams:
    """IRLS maximum likelihood for a binary outcome.

    Convergence is a relative deviance change below ``tol``; up to five
    step-halvings recover from deviance increases.
    """
    y = np.asarray(y, dtype=np.float64)
    if np.unique(y).size < 2:
        raise FitError("single-class outcome")
    n, p = X.shape
    Z = np.column_stack([np.ones(n), X])
    beta = np.zeros(p + 1)
    dev = _deviance(y, Z @ beta)
    for it in range(1, max_iter + 1):
        eta = Z @ beta
        mu = 1.0 / (1.0 + np.exp(-eta))
        w = np.clip(mu * (1.0 - mu), 1e-10, None)
        z = eta + (y - mu) / w
        WZ = Z * w[:, None]
        try:
            new = np.linalg.solve(Z.T @ WZ, WZ.T @ z)
        except np.linalg.LinAlgError as e:
            raise FitError(f"singular weighted normal equations: {e}") from e
        step = new - beta
        scale = 1.0
        new_dev = _deviance(y, Z @ (beta + step))
        halvings = 0
        while new_dev > dev + 1e-12 and halvings < 5:
            scale *= 0.5
            halvings += 1
            new_dev = _deviance(y, Z @ (beta + scale * step))
        beta = beta + scale * step
        rel = abs(dev - new_dev) / (abs(new_dev) + 0.1)
        dev = new_dev
        if rel < tol:
            break
    sep = bool(np.abs(beta).max() > SEPARATION_BOUND)
    return LogisticParams(float(beta[0]), beta[1:].copy(), dev, it, sep)


def fit_linear(X: np.ndarray, y: np.ndarray) -> LinearParams:
    """Least squares through a pivoted orthogonal decomposition.

    Rank deficiency is an error naming the aliased columns.
    """
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    if n <= p + 1:
        raise FitError(f"need more rows ({n}) than columns ({p + 1}) for an unpenalized fit")
    Z = np.column_stack([np.ones(n), X])
    q, r, piv = scipy.linalg.qr(Z, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag.max() * max(Z.shape) * np.finfo(np.float64).eps
    rank = int((diag > tol).sum())
    if rank < p + 1:
        aliased = sorted(piv[rank:])
        names = ["(intercept)" if j == 0 else f"column {j - 1}" for j in aliased]
        raise FitError(f"rank-deficient design; aliased: {', '.join(names)}")
    beta = scipy.linalg.solve_triangular(r, q.T @ y)
    beta = beta[np.argsort(piv)]
    resid = y - Z @ beta
    dof = max(n - (p + 1), 1)
    return LinearParams(float(beta[0]), beta[1:].copy(), float(resid @ resid / dof))


def _soft_threshold(x: float, k: float) -> float:
    if x > k:
        return x - k
    if x < -k:
        return x + k
    return 0.0


def fit_elastic_net(X: np.ndarray, y: np.ndarray, penalty: float, mixture: float,
                    tol: float = 1e-7, max_passes: int = 1000) -> ElasticNetParams:
    """Coordinate descent on (1/2n)||y - b0 - Xb||^2 + penalty * (mixture*|b|_1 + (1-mixture)/2*|b|_2^2).

    Predictors are standardized internally (population sd); coefficients are
    returned on the original scale.  The KKT residual must be below 1e-6 at
    exit or the fit raises.
    """
    if penalty < 0:
        raise FitError("penalty must be >= 0")
    if not 0.0 <= mixture <= 1.0:
        raise FitError("mixture must lie in [0, 1]")
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    x_mean = X.mean(axis=0)
    x_sd = X.std(axis=0)
    if (x_sd < 1e-12).any():
        raise FitError("constant predictor column; drop it before fitting")
    Xs = (X - x_mean) / x_sd
    y_mean = float(y.mean())
    yc = y - y_mean

    lam1 = penalty * mixture
    lam2 = penalty * (1.0 - mixture)
    beta = np.zeros(p)
    resid = yc.copy()

    def kkt_residual() -> float:
        grad = -(Xs.T @ resid) / n + lam2 * beta
        worst = 0.0
        for j in range(p):
            if beta[j] != 0.0:
                worst = max(worst, abs(grad[j] + lam1 * np.sign(beta[j])))
            else:
                worst = max(worst, max(0.0, abs(grad[j]) - lam1))
        return worst

    kkt = np.inf
    n_pass = 0
    for n_pass in range(1, max_passes + 1):
        max_delta = 0.0
        for j in range(p):
            bj = beta[j]
            rho = (Xs[:, j] @ resid) / n + bj  # column variance is 1 after standardizing
            new = _soft_threshold(rho, lam1) / (1.0 + lam2)
            if new != bj:
                resid -= (new - bj) * Xs[:, j]
                beta[j] = new
                max_delta = max(max_delta, abs(new - bj))
        if max_delta < tol:
            kkt = kkt_residual()
            if kkt < 1e-6:
                break
    else:
        raise FitError(f"elastic net did not converge in {max_passes} passes "
                       f"(KKT residual {kkt_residual():.2e})")

    coef = beta / x_sd
    intercept = y_mean - float(coef @ x_mean)
    return ElasticNetParams(intercept, coef, penalty, mixture, float(kkt), n_pass)
