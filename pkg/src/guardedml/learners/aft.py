"""Accelerated failure time machinery.

* ``fit_weibull_aft``: Newton-maximized censored log-likelihood of
  log T = mu + b'x + sigma*W with standard extreme-value W.
* ``build_aft_interval_targets``: per-row log-time interval bounds,
  [l, l] for events and [l, +inf) for right-censored rows.
* ``fit_gbm``: boosted regression trees on first/second-order gradients of a
  squared or normal-AFT loss, with per-row hessian clamping and a leaf-scale
  halving guard that keeps the training loss non-increasing by construction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import special

from ._tree_builder import BinnedMatrix, Tree, bin_matrix, build_tree
from .base import FitError

SQRT2 = math.sqrt(2.0)
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
HESSIAN_FLOOR = 1e-6


# ----------------------------------------------------------------------------
# Weibull AFT


@dataclass(frozen=True)
class WeibullParams:
    intercept: float
    coef: np.ndarray
    log_scale: float
    loglik: float
    n_iter: int

    @property
    def scale(self) -> float:
        return math.exp(self.log_scale)


def _weibull_ll_grad_hess(theta, X, y, status):
    n, p = X.shape
    mu, beta, s = theta[0], theta[1:p + 1], theta[p + 1]
    sigma = math.exp(s)
    w = (y - mu - X @ beta) / sigma
    u = np.exp(np.clip(w, -700, 700))
    ev = status > 0

    ll = float(np.sum(np.where(ev, w - u - s, -u)))
    a = np.where(ev, 1.0 - u, -u)       # dll/dw per row
    b = -u                              # d2ll/dw2 per row, both cases

    dw = np.empty((n, p + 2))
    dw[:, 0] = -1.0 / sigma
    dw[:, 1:p + 1] = -X / sigma
    dw[:, p + 1] = -w

    grad = dw.T @ a
    grad[p + 1] -= float(ev.sum())      # events carry an explicit -s term

    hess = (dw * b[:, None]).T @ dw
    # second derivatives of w: only the mixed (mu, beta) x s and s x s entries are nonzero
    hess[0, p + 1] += float(a.sum() / sigma)
    hess[p + 1, 0] += float(a.sum() / sigma)
    hess[1:p + 1, p + 1] += (X.T @ a) / sigma
    hess[p + 1, 1:p + 1] += (X.T @ a) / sigma
    hess[p + 1, p + 1] += float(a @ w)
    return ll, grad, hess


def fit_weibull_aft(X: np.ndarray, time: np.ndarray, status: np.ndarray,
                    tol: float = 1e-9, max_iter: int = 50) -> WeibullParams:
    """Newton on (mu, beta, log sigma); converges at gradient infinity-norm < tol."""
    time = np.asarray(time, dtype=np.float64)
    status = np.asarray(status, dtype=np.float64)
    if (time <= 0).any():
        raise FitError("time must be positive")
    if status.sum() < 1:
        raise FitError("at least one event is required")
    y = np.log(time)
    n, p = X.shape
    theta = np.zeros(p + 2)
    theta[0] = float(y.mean())
    theta[p + 1] = float(np.log(max(y.std(), 1e-3)))
    ll, grad, hess = _weibull_ll_grad_hess(theta, X, y, status)
    it = 0
    for it in range(1, max_iter + 1):
        if np.abs(grad).max() < tol:
            return WeibullParams(float(theta[0]), theta[1:p + 1].copy(),
                                 float(theta[p + 1]), ll, it)
        try:
            delta = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            delta = grad / (np.abs(hess).max() + 1.0)
        if grad @ delta <= 0:
            # far from the optimum the Hessian can be indefinite; fall back to
            # a scaled gradient step, which step halving always accepts
            delta = grad / (np.abs(hess).max() + 1.0)
        if abs(delta[p + 1]) > 2.0:
            # trust region on the log-scale: huge sigma jumps overflow the
            # extreme-value likelihood on near-noiseless data
            delta = delta * (2.0 / abs(delta[p + 1]))
        step = 1.0
        for _ in range(40):
            cand = theta + step * delta
            ll_new, grad_new, hess_new = _weibull_ll_grad_hess(cand, X, y, status)
            if ll_new >= ll - 1e-12:
                theta, ll, grad, hess = cand, ll_new, grad_new, hess_new
                break
            step *= 0.5
        else:
            raise FitError("Weibull fit: step halving exhausted")
    if np.abs(grad).max() < tol:
        return WeibullParams(float(theta[0]), theta[1:p + 1].copy(),
                             float(theta[p + 1]), ll, it)
    raise FitError(f"Weibull fit did not converge in {max_iter} iterations")


def weibull_location(params: WeibullParams, X: np.ndarray) -> np.ndarray:
    return params.intercept + X @ params.coef


# ----------------------------------------------------------------------------
# Interval targets


@dataclass(frozen=True)
class AftIntervalTargets:
    lower: np.ndarray   # log-time per row
    upper: np.ndarray   # log-time for events, +inf for right-censored rows


def build_aft_interval_targets(time, status, start=None) -> AftIntervalTargets:
    """[log t, log t] for events; [log t, +inf) for right-censored rows."""
    if start is not None:
        raise FitError("start-stop outcomes are not supported")
    time = np.asarray(time, dtype=np.float64)
    status = np.asarray(status, dtype=np.float64)
    if (time <= 0).any() or np.isnan(time).any():
        raise FitError("time must be positive")
    if not np.isin(status, (0.0, 1.0)).all():
        raise FitError("status must be 0/1")
    lower = np.log(time)
    upper = np.where(status > 0, lower, np.inf)
    return AftIntervalTargets(lower, upper)


# ----------------------------------------------------------------------------
# Gradient boosting


@dataclass(frozen=True)
class GbmParams:
    loss: str
    base_score: float
    learn_rate: float
    sigma: float
    trees: tuple[Tree, ...]
    train_loss: tuple[float, ...]   # mean loss after each round, round 0 first


def _normal_hazard(r: np.ndarray) -> np.ndarray:
    """phi(r) / (1 - Phi(r)), stable for any r via the scaled complementary erf."""
    return SQRT_2_OVER_PI / special.erfcx(r / SQRT2)


def _aft_normal_loss_terms(eta, lower, censored, sigma):
    r = (lower - eta) / sigma
    loss = np.where(
        censored,
        -np.log(0.5 * special.erfcx(r / SQRT2)) + 0.5 * r * r,  # -log(1 - Phi(r))
        0.5 * r * r + math.log(sigma) + LOG_SQRT_2PI,
    )
    lam = _normal_hazard(r)
    g = np.where(censored, -lam / sigma, -r / sigma)
    h = np.where(censored, lam * (lam - r) / sigma ** 2, 1.0 / sigma ** 2)
    return loss, g, h


def gbm_loss_gradients(eta, targets, loss: str, sigma: float = 1.0):
    """Per-row (loss, gradient, hessian) w.r.t. the prediction eta."""
    if loss == "squared":
        y = np.asarray(targets, dtype=np.float64)
        resid = eta - y
        return 0.5 * resid ** 2, resid, np.ones_like(resid)
    if loss == "aft_normal":
        censored = np.isinf(targets.upper)
        return _aft_normal_loss_terms(eta, targets.lower, censored, sigma)
    raise FitError(f"unknown gbm loss {loss!r}")


def fit_gbm(X: np.ndarray, targets, loss: str, rounds: int = 100,
            learn_rate: float = 0.1, max_depth: int = 3, min_leaf: int = 10,
            sigma: float = 1.0, seed: int = 0) -> GbmParams:
    """Second-order boosting; deterministic (no subsampling, seed reserved).

    Hessians are clamped at 1e-6 per row.  After each round the training loss
    is re-evaluated; a round that would increase it has its leaf values halved
    (at most five times, then zeroed), so the loss trace is non-increasing.
    """
    if rounds < 0:
        raise FitError("rounds must be >= 0")
    if learn_rate <= 0:
        raise FitError("learn_rate must be > 0")
    n = X.shape[0]
    if loss == "squared":
        y = np.asarray(targets, dtype=np.float64)
        base = float(y.mean())
    elif loss == "aft_normal":
        if not isinstance(targets, AftIntervalTargets):
            raise FitError("aft_normal loss requires AftIntervalTargets")
        events = ~np.isinf(targets.upper)
        if not events.any():
            raise FitError("at least one event is required for the aft loss")
        base = float(np.median(targets.lower[events]))
    else:
        raise FitError(f"unknown gbm loss {loss!r}")

    eta = np.full(n, base)
    binned = bin_matrix(X)
    trees: list[Tree] = []
    losses: list[float] = []
    cur_loss_vec, g, h = gbm_loss_gradients(eta, targets, loss, sigma)
    cur = float(cur_loss_vec.mean())
    losses.append(cur)
    for _ in range(rounds):
        h_clamped = np.maximum(h, HESSIAN_FLOOR)
        tree = build_tree(binned, "newton", g=g, h=h_clamped,
                          max_depth=max_depth, min_n=1, min_leaf=min_leaf)
        contrib = learn_rate * tree.predict(X)[:, 0]
        scale = 1.0
        for _half in range(6):
            new_loss_vec, g_new, h_new = gbm_loss_gradients(eta + scale * contrib, targets, loss, sigma)
            new = float(new_loss_vec.mean())
            if new <= cur:
                break
            scale *= 0.5
        else:
            scale = 0.0
            new_loss_vec, g_new, h_new = gbm_loss_gradients(eta, targets, loss, sigma)
            new = cur
        if scale != 1.0:
            tree = replace(tree, leaf_value=tree.leaf_value * scale)
        eta = eta + scale * contrib
        g, h, cur = g_new, h_new, new
        trees.append(tree)
        losses.append(cur)
    return GbmParams(loss, base, learn_rate, sigma, tuple(trees), tuple(losses))


def gbm_predict(params: GbmParams, X: np.ndarray) -> np.ndarray:
    eta = np.full(X.shape[0], params.base_score)
    for tree in params.trees:
        eta += params.learn_rate * tree.predict(X)[:, 0]
    return eta
