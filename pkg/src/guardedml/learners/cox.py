"""Cox proportional hazards by Newton iteration on the Efron-tie-corrected
partial log-likelihood, with optional ridge penalty and a Breslow baseline
cumulative hazard so full survival curves are available."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import FitError

MONOTONE_BOUND = 15.0


@dataclass(frozen=True)
class CoxParams:
    coef: np.ndarray
    x_mean: np.ndarray
    baseline_times: np.ndarray    # distinct event times, ascending
    baseline_cumhaz: np.ndarray   # Breslow H0 at those times
    loglik: float
    n_iter: int
    monotone_likelihood: bool
    se: np.ndarray                # from the observed information at the estimate


def _efron_quantities(Xc, time, status, beta, need_hessian=True):
    """Penalty-free log-likelihood, gradient and Hessian in one sorted pass."""
    n, p = Xc.shape
    order = np.argsort(time, kind="stable")
    t, d = time[order], status[order]
    X = Xc[order]
    eta = X @ beta
    eta = eta - eta.max()  # rescale for stable exponentials; cancels in all ratios
    w = np.exp(eta)
    wx = X * w[:, None]

    # suffix sums over the risk set {j : t_j >= t_k}
    S = np.cumsum(w[::-1])[::-1]
    V = np.cumsum(wx[::-1], axis=0)[::-1]
    if need_hessian:
        wxx = np.einsum("ij,ik->ijk", X, wx)
        M = np.cumsum(wxx[::-1], axis=0)[::-1]

    ll = 0.0
    grad = np.zeros(p)
    hess = np.zeros((p, p))
    i = 0
    while i < n:
        j = i
        while j < n and t[j] == t[i]:
            j += 1
        ev = np.flatnonzero(d[i:j] > 0) + i
        dk = ev.size
        if dk > 0:
            S_D = w[ev].sum()
            V_D = wx[ev].sum(axis=0)
            ll += eta[ev].sum()
            if need_hessian:
                M_D = np.einsum("ij,ik->jk", X[ev], wx[ev])
            for l in range(dk):
                frac = l / dk
                phi = S[i] - frac * S_D
                nu = (V[i] - frac * V_D) / phi
                ll -= np.log(phi)
                grad += -nu
                if need_hessian:
                    hess -= (M[i] - frac * M_D) / phi - np.outer(nu, nu)
            grad += X[ev].sum(axis=0)
        i = j
    return ll, grad, hess


def fit_cox(X: np.ndarray, time: np.ndarray, status: np.ndarray,
            ridge: float = 0.0, tol: float = 1e-9, max_iter: int = 20) -> CoxParams:
    """Newton maximization; converges when the gradient infinity-norm < tol.

    A run that exhausts its iterations with a coefficient beyond the monotone
    bound is returned flagged rather than raised (the Cox analogue of
    separation); any other non-convergence raises.
    """
    time = np.asarray(time, dtype=np.float64)
    status = np.asarray(status, dtype=np.float64)
    if status.sum() < 1:
        raise FitError("at least one event is required")
    if ridge < 0:
        raise FitError("ridge penalty must be >= 0")
    n, p = X.shape
    x_mean = X.mean(axis=0)
    Xc = X - x_mean

    beta = np.zeros(p)
    ll, grad, hess = _efron_quantities(Xc, time, status, beta)
    ll -= 0.5 * ridge * beta @ beta
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g = grad - ridge * beta
        if np.abs(g).max() < tol:
            converged = True
            break
        H = hess - ridge * np.eye(p)
        try:
            delta = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError as e:
            raise FitError(f"singular information matrix: {e}") from e
        step = 1.0
        for _ in range(30):
            cand = beta + step * delta
            ll_new, grad_new, hess_new = _efron_quantities(Xc, time, status, cand)
            ll_new -= 0.5 * ridge * cand @ cand
            if ll_new >= ll - 1e-12:
                beta, ll, grad, hess = cand, ll_new, grad_new, hess_new
                break
            step *= 0.5
        else:
            break
    else:
        converged = np.abs(grad - ridge * beta).max() < tol

    monotone = False
    if not converged:
        if np.abs(beta).max() > MONOTONE_BOUND:
            monotone = True
        else:
            raise FitError(f"Cox fit did not converge in {max_iter} iterations")

    info = -(hess - ridge * np.eye(p))
    try:
        se = np.sqrt(np.diag(np.linalg.inv(info)))
    except np.linalg.LinAlgError:
        se = np.full(p, np.nan)

    bl_times, bl_ch = _breslow_baseline(Xc, time, status, beta)
    return CoxParams(beta.copy(), x_mean, bl_times, bl_ch, float(ll), it, monotone, se)


def _breslow_baseline(Xc, time, status, beta):
    order = np.argsort(time, kind="stable")
    t, d = time[order], status[order]
    w = np.exp(Xc[order] @ beta)
    S = np.cumsum(w[::-1])[::-1]
    times, increments = [], []
    i = 0
    n = t.size
    while i < n:
        j = i
        while j < n and t[j] == t[i]:
            j += 1
        dk = float(d[i:j].sum())
        if dk > 0:
            times.append(t[i])
            increments.append(dk / S[i])
        i = j
    return np.asarray(times), np.cumsum(np.asarray(increments))


def cox_risk(params: CoxParams, X: np.ndarray) -> np.ndarray:
    """Centered linear predictor; higher = worse."""
    return (X - params.x_mean) @ params.coef


def cox_cumhaz_at(params: CoxParams, times) -> np.ndarray:
    times = np.asarray(times, dtype=np.float64)
    idx = np.searchsorted(params.baseline_times, times, side="right") - 1
    base = np.concatenate(([0.0], params.baseline_cumhaz))
    return base[idx + 1]
