"""Piecewise-exponential distribution family and Kaplan-Meier machinery.

The hazard is constant on intervals (c_{k-1}, c_k] between user-supplied
cutpoints, with c_0 = 0 and the last interval unbounded.  Rates are
parameterized as a baseline log-rate plus one log hazard ratio per later
interval (baseline-relative, not chained), which keeps them positive during
Newton maximization.  S(t) = exp(-H(t)) holds identically.
"""
from __future__ import annotations

import math
import warnings as _warnings
from dataclasses import dataclass

import numpy as np


class SurvivalError(ValueError):
    pass


class CutpointWarning(UserWarning):
    pass


def normalize_cutpoints(raw) -> tuple[float, ...]:
    """Keep positive finite cutpoints, deduplicated and sorted; warn when modified."""
    raw = list(np.atleast_1d(np.asarray(raw, dtype=np.float64))) if raw is not None else []
    kept = sorted({float(c) for c in raw if np.isfinite(c) and c > 0})
    if len(kept) != len(raw):
        _warnings.warn(
            f"cutpoints normalized from {raw} to {kept} "
            "(nonpositive/non-finite dropped, duplicates removed)", CutpointWarning)
    return tuple(kept)


@dataclass(frozen=True)
class PexpParams:
    cutpoints: tuple[float, ...]
    log_rate: float
    log_ratios: tuple[float, ...]

    def __post_init__(self):
        cps = tuple(float(c) for c in self.cutpoints)
        if any(not np.isfinite(c) or c <= 0 for c in cps):
            raise SurvivalError("cutpoints must be positive and finite")
        if any(a >= b for a, b in zip(cps, cps[1:])):
            raise SurvivalError("cutpoints must be strictly increasing")
        if len(self.log_ratios) != len(cps):
            raise SurvivalError("need one log ratio per cutpoint")
        object.__setattr__(self, "cutpoints", cps)
        object.__setattr__(self, "log_ratios", tuple(float(r) for r in self.log_ratios))

    @property
    def rates(self) -> np.ndarray:
        """Interval rates: lambda_1 = exp(log_rate), lambda_{k+1} = exp(log_rate + ratio_k)."""
        return np.exp(self.log_rate + np.concatenate(([0.0], self.log_ratios)))

    @property
    def edges(self) -> np.ndarray:
        return np.concatenate(([0.0], self.cutpoints))


def _check_positive_times(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if (t <= 0).any() or np.isnan(t).any():
        raise SurvivalError("t must be positive")
    return t


def _interval_index(params: PexpParams, t: np.ndarray) -> np.ndarray:
    # left-closed on the right endpoint: t = c_k belongs to (c_{k-1}, c_k]
    return np.searchsorted(np.asarray(params.cutpoints), t, side="left")


def pexp_hazard(params: PexpParams, t):
    t = _check_positive_times(t)
    return params.rates[_interval_index(params, t)]


def pexp_cumhaz(params: PexpParams, t):
    """Sum of hazards over completed intervals plus the partial current interval."""
    t = _check_positive_times(t)
    rates, edges = params.rates, params.edges
    seg = rates[:-1] * np.diff(edges) if edges.size > 1 else np.empty(0)
    cum = np.concatenate(([0.0], np.cumsum(seg)))
    k = _interval_index(params, t)
    return cum[k] + rates[k] * (t - edges[k])


def pexp_survival(params: PexpParams, t):
    return np.exp(-pexp_cumhaz(params, t))


def pexp_density(params: PexpParams, t):
    return pexp_hazard(params, t) * pexp_survival(params, t)


def pexp_quantile(params: PexpParams, p):
    """Smallest t with 1 - S(t) = p, inverted piecewise-analytically."""
    p = np.asarray(p, dtype=np.float64)
    if (p <= 0).any() or (p >= 1).any() or np.isnan(p).any():
        raise SurvivalError("p must lie in (0, 1)")
    rates, edges = params.rates, params.edges
    seg = rates[:-1] * np.diff(edges) if edges.size > 1 else np.empty(0)
    cum = np.concatenate(([0.0], np.cumsum(seg)))  # H at each edge
    target = -np.log1p(-p)
    k = np.clip(np.searchsorted(cum, target, side="right") - 1, 0, len(cum) - 1)
    return edges[k] + (target - cum[k]) / rates[k]


def pexp_sample(params: PexpParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Inverse-transform draws."""
    return pexp_quantile(params, rng.uniform(1e-12, 1.0 - 1e-12, size=n))


def _pexp_sufficient_stats(time, status, cutpoints):
    """Per-interval exposure and event counts."""
    time = np.asarray(time, dtype=np.float64)
    status = np.asarray(status, dtype=np.float64)
    edges = np.concatenate(([0.0], cutpoints, [np.inf]))
    K1 = len(cutpoints) + 1
    exposure = np.zeros(K1)
    events = np.zeros(K1)
    for k in range(K1):
        lo, hi = edges[k], edges[k + 1]
        exposure[k] = np.clip(np.minimum(time, hi) - lo, 0.0, None).sum()
    idx = np.searchsorted(np.asarray(cutpoints), time, side="left")
    np.add.at(events, idx, status)
    return exposure, events


def pexp_loglik(params: PexpParams, time, status) -> float:
    time = _check_positive_times(time)
    status = np.asarray(status, dtype=np.float64)
    h = pexp_hazard(params, time)
    H = pexp_cumhaz(params, time)
    return float(np.sum(status * np.log(h) - H))


def fit_pexp(time, status, cutpoints, tol: float = 1e-8, max_iter: int = 100) -> PexpParams:
    """Maximum likelihood on (log_rate, log_ratios) by Newton iteration.

    Converges when the gradient infinity-norm drops below ``tol``.  The
    no-cutpoint case is the exponential MLE events/exposure in closed form.
    """
    time = _check_positive_times(time)
    status = np.asarray(status, dtype=np.float64)
    if status.sum() < 1:
        raise SurvivalError("at least one event is required")
    cutpoints = normalize_cutpoints(cutpoints)
    exposure, events = _pexp_sufficient_stats(time, status, cutpoints)
    if (exposure <= 0).any():
        raise SurvivalError(f"interval(s) {np.flatnonzero(exposure <= 0) + 1} have zero exposure")
    if (events <= 0).any():
        raise SurvivalError(
            f"interval(s) {np.flatnonzero(events <= 0) + 1} have no events; "
            "the boundary MLE does not exist, remove or merge cutpoints")

    if not cutpoints:
        return PexpParams((), math.log(events[0] / exposure[0]), ())

    K = len(cutpoints)
    theta = np.zeros(K + 1)
    theta[0] = math.log(events.sum() / exposure.sum())

    def rates_of(th):
        return np.exp(th[0] + np.concatenate(([0.0], th[1:])))

    def loglik_of(th):
        lam = rates_of(th)
        return float(np.sum(events * np.log(lam) - lam * exposure))

    ll = loglik_of(theta)
    for _ in range(max_iter):
        lam = rates_of(theta)
        m = lam * exposure
        grad = np.empty(K + 1)
        grad[0] = events.sum() - m.sum()
        grad[1:] = events[1:] - m[1:]
        if np.abs(grad).max() < tol:
            return PexpParams(cutpoints, float(theta[0]), tuple(theta[1:]))
        hess = np.zeros((K + 1, K + 1))
        hess[0, 0] = -m.sum()
        hess[0, 1:] = hess[1:, 0] = -m[1:]
        hess[1:, 1:] = -np.diag(m[1:])
        delta = np.linalg.solve(hess, -grad)
        step = 1.0
        for _half in range(30):
            cand = theta + step * delta
            ll_new = loglik_of(cand)
            if ll_new >= ll - 1e-12:
                theta, ll = cand, ll_new
                break
            step *= 0.5
        else:
            raise SurvivalError("piecewise-exponential fit: step halving exhausted")
    raise SurvivalError("piecewise-exponential fit did not converge")


# ----------------------------------------------------------------------------
# Kaplan-Meier


@dataclass(frozen=True)
class KmCurve:
    """Product-limit estimate: right-continuous step function with S(0) = 1."""
    times: np.ndarray      # distinct event times, sorted
    n_risk: np.ndarray
    n_event: np.ndarray
    survival: np.ndarray   # value on [times[j], times[j+1])

    def evaluate(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if self.times.size == 0:
            return np.ones_like(t)
        idx = np.searchsorted(self.times, t, side="right") - 1
        return np.where(idx >= 0, self.survival[np.clip(idx, 0, None)], 1.0)

    def evaluate_left(self, t) -> np.ndarray:
        """Left limit S(t-)."""
        t = np.asarray(t, dtype=np.float64)
        if self.times.size == 0:
            return np.ones_like(t)
        idx = np.searchsorted(self.times, t, side="left") - 1
        return np.where(idx >= 0, self.survival[np.clip(idx, 0, None)], 1.0)


def km_fit(time, status) -> KmCurve:
    """Kaplan-Meier estimator; ties of events and censorings put censorings after events."""
    time = np.asarray(time, dtype=np.float64)
    status = np.asarray(status, dtype=np.float64)
    if time.size == 0:
        raise SurvivalError("empty input")
    order = np.argsort(time, kind="stable")
    t_sorted, s_sorted = time[order], status[order]
    distinct, start = np.unique(t_sorted, return_index=True)
    n = time.size
    times, n_risk, n_event, surv = [], [], [], []
    s_val = 1.0
    for j, t in enumerate(distinct):
        lo = start[j]
        hi = start[j + 1] if j + 1 < len(start) else n
        d = float(s_sorted[lo:hi].sum())
        if d == 0:
            continue
        at_risk = n - lo
        s_val *= 1.0 - d / at_risk
        times.append(t)
        n_risk.append(at_risk)
        n_event.append(d)
        surv.append(s_val)
    return KmCurve(np.asarray(times), np.asarray(n_risk, dtype=np.float64),
                   np.asarray(n_event, dtype=np.float64), np.asarray(surv))


def km_censoring_fit(time, status) -> KmCurve:
    """Censoring-distribution estimate: the same product limit with flipped status."""
    status = np.asarray(status, dtype=np.float64)
    return km_fit(time, 1.0 - status)


def rmst(curve: KmCurve, tau: float) -> float:
    """Area under the step survival curve on [0, tau]."""
    if tau <= 0:
        raise SurvivalError("tau must be positive")
    knots = curve.times[curve.times < tau]
    values = np.concatenate(([1.0], curve.survival[: knots.size]))
    edges = np.concatenate(([0.0], knots, [tau]))
    return float(np.sum(values * np.diff(edges)))
