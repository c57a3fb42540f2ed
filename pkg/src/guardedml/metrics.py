"""Classification, regression, and survival metrics plus bootstrap CIs.

Metrics return ``MetricValue`` records; an estimate of None marks a metric
that is undefined on the given frame (single-class truth, no comparable
pairs, ...) rather than an error, so fold-level degeneracy stays visible
without being fatal.
"""
from __future__ import annotations

import warnings as _warnings
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from ._rng import substream
from .survival_stats import km_censoring_fit, km_fit, rmst

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


class MetricWarning(UserWarning):
    pass

DIRECTIONS = {
    "accuracy": "maximize", "kappa": "maximize", "sens": "maximize", "spec": "maximize",
    "precision": "maximize", "f_meas": "maximize", "roc_auc": "maximize",
    "rsq": "maximize", "c_index": "maximize", "uno_c": "maximize",
    "rmse": "minimize", "mae": "minimize", "logloss": "minimize", "brier": "minimize",
    "ece": "minimize", "ibs": "minimize", "rmst_diff": "minimize",
}


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricValue:
    name: str
    estimate: float | None
    direction: str
    lower: float | None = None
    upper: float | None = None
    n_boot: int | None = None

    @property
    def defined(self) -> bool:
        return self.estimate is not None


def _mv(name: str, estimate) -> MetricValue:
    direction = DIRECTIONS[name.split("(")[0]]
    est = None if estimate is None else float(estimate)
    return MetricValue(name, est, direction)


# ----------------------------------------------------------------------------
# Prediction frames


@dataclass(frozen=True)
class ClassificationFrame:
    truth: np.ndarray          # level codes
    probs: np.ndarray          # (n, n_levels) in level order
    levels: tuple[str, ...]
    positive_index: int = 1

    @property
    def n(self) -> int:
        return self.truth.size

    def take(self, idx) -> "ClassificationFrame":
        idx = np.asarray(idx)
        return replace(self, truth=self.truth[idx], probs=self.probs[idx])


@dataclass(frozen=True)
class RegressionFrame:
    truth: np.ndarray
    pred: np.ndarray

    @property
    def n(self) -> int:
        return self.truth.size

    def take(self, idx) -> "RegressionFrame":
        idx = np.asarray(idx)
        return RegressionFrame(self.truth[idx], self.pred[idx])


@dataclass(frozen=True)
class SurvivalFrame:
    time: np.ndarray
    status: np.ndarray
    risk: np.ndarray
    curves: object | None = None  # SurvivalCurves or None for risk-only models

    @property
    def n(self) -> int:
        return self.time.size

    def take(self, idx) -> "SurvivalFrame":
        idx = np.asarray(idx)
        return SurvivalFrame(
            self.time[idx], self.status[idx], self.risk[idx],
            self.curves.take(idx) if self.curves is not None else None)


# ----------------------------------------------------------------------------
# Classification


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size, dtype=np.float64)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j < x.size and sx[j] == sx[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j - 1) + 1.0
        i = j
    return ranks


def roc_auc(scores: np.ndarray, positive: np.ndarray) -> float | None:
    """Mann-Whitney statistic with half credit for ties; None for single-class truth."""
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _average_ranks(np.asarray(scores, dtype=np.float64))
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _kappa(truth: np.ndarray, pred: np.ndarray, k: int) -> float | None:
    n = truth.size
    cm = np.bincount(truth * k + pred, minlength=k * k).reshape(k, k).astype(np.float64)
    po = np.trace(cm) / n
    pe = float(cm.sum(axis=1) @ cm.sum(axis=0)) / (n * n)
    if pe >= 1.0:
        return None
    return (po - pe) / (1.0 - pe)


def classification_metrics(frame: ClassificationFrame, threshold: float = 0.5) -> list[MetricValue]:
    """Confusion metrics at the threshold plus AUC, logloss, brier, and ECE.

    Multiclass frames report accuracy, kappa, and logloss only.
    """
    k = len(frame.levels)
    truth = frame.truth
    n = frame.n
    p_true = np.clip(frame.probs[np.arange(n), truth], 1e-15, 1.0 - 1e-15)
    logloss = float(-np.mean(np.log(p_true)))

    if k > 2:
        pred = np.argmax(frame.probs, axis=1)
        return [
            _mv("accuracy", float(np.mean(pred == truth))),
            _mv("kappa", _kappa(truth, pred, k)),
            _mv("logloss", logloss),
        ]

    pos = frame.positive_index
    p_pos = frame.probs[:, pos]
    y = (truth == pos)
    pred_pos = p_pos >= threshold
    tp = float(np.sum(pred_pos & y))
    tn = float(np.sum(~pred_pos & ~y))
    fp = float(np.sum(pred_pos & ~y))
    fn = float(np.sum(~pred_pos & y))

    sens = tp / (tp + fn) if tp + fn > 0 else None
    spec = tn / (tn + fp) if tn + fp > 0 else None
    precision = tp / (tp + fp) if tp + fp > 0 else None
    f_meas = (2 * precision * sens / (precision + sens)
              if precision is not None and sens is not None and precision + sens > 0 else None)

    pred_codes = np.where(pred_pos, pos, 1 - pos)
    bins = np.clip((p_pos * 10).astype(int), 0, 9)
    ece = 0.0
    for b in range(10):
        mask = bins == b
        if mask.any():
            ece += mask.sum() / n * abs(float(p_pos[mask].mean()) - float(y[mask].mean()))

    return [
        _mv("accuracy", (tp + tn) / n),
        _mv("kappa", _kappa(truth, pred_codes, 2)),
        _mv("sens", sens),
        _mv("spec", spec),
        _mv("precision", precision),
        _mv("f_meas", f_meas),
        _mv("roc_auc", roc_auc(p_pos, y)),
        _mv("logloss", logloss),
        _mv("brier", float(np.mean((p_pos - y.astype(np.float64)) ** 2))),
        _mv("ece", ece),
    ]


def regression_metrics(frame: RegressionFrame) -> list[MetricValue]:
    err = frame.pred - frame.truth
    sst = float(np.sum((frame.truth - frame.truth.mean()) ** 2))
    rsq = None if frame.n < 2 or sst <= 0 else 1.0 - float(err @ err) / sst
    return [
        _mv("rmse", float(np.sqrt(np.mean(err ** 2)))),
        _mv("rsq", rsq),
        _mv("mae", float(np.mean(np.abs(err)))),
    ]


# ----------------------------------------------------------------------------
# Survival


def harrell_c(risk, time, status) -> MetricValue:
    """Pairwise concordance: pairs (i, j) with t_i < t_j and an event at i are
    comparable; risk ties earn half credit."""
    risk = np.asarray(risk, dtype=np.float64)
    time = np.asarray(time, dtype=np.float64)
    status = np.asarray(status, dtype=np.float64)
    comparable = (time[:, None] < time[None, :]) & (status[:, None] > 0)
    n_pairs = int(comparable.sum())
    if n_pairs == 0:
        return _mv("c_index", None)
    conc = (risk[:, None] > risk[None, :]) & comparable
    ties = (risk[:, None] == risk[None, :]) & comparable
    return _mv("c_index", (conc.sum() + 0.5 * ties.sum()) / n_pairs)


def standardize_c(c: float) -> float:
    """Direction-standardized concordance: values below 0.5 are replaced by 1 - C."""
    if not 0.0 <= c <= 1.0:
        raise MetricError("concordance must lie in [0, 1]")
    return max(c, 1.0 - c)


def uno_c(risk, time, status, tau: float | None = None) -> MetricValue:
    """IPCW concordance with weights G(t_i)^-2 over comparable pairs with t_i < tau."""
    risk = np.asarray(risk, dtype=np.float64)
    time = np.asarray(time, dtype=np.float64)
    status = np.asarray(status, dtype=np.float64)
    if not (status > 0).any():
        return _mv("uno_c", None)
    if tau is None:
        tau = float(time[status > 0].max())
    G = km_censoring_fit(time, status)
    g_at = G.evaluate(time)
    usable = g_at > 0
    if not usable.all():
        tau = min(tau, float(time[usable].max()))
        _warnings.warn(
            f"censoring survival reaches 0 inside the horizon; tau truncated to {tau:g}",
            MetricWarning)
    comparable = (time[:, None] < time[None, :]) & (status[:, None] > 0) \
        & (time[:, None] < tau) & usable[:, None]
    n_pairs = int(comparable.sum())
    if n_pairs == 0:
        return _mv("uno_c", None)
    with np.errstate(divide="ignore"):
        w = np.where(usable, 1.0 / np.square(np.where(usable, g_at, 1.0)), 0.0)
    wmat = w[:, None] * comparable
    conc = (risk[:, None] > risk[None, :])
    ties = (risk[:, None] == risk[None, :])
    num = float((wmat * conc).sum() + 0.5 * (wmat * ties).sum())
    den = float(wmat.sum())
    return _mv("uno_c", num / den if den > 0 else None)


def brier_survival(curves, time, status, t_star: float) -> MetricValue:
    """IPCW Brier score at t*.

    Events before t* contribute S(t*)^2 / G(t_i); rows still at risk past t*
    contribute (1 - S(t*))^2 / G(t*); rows censored before t* contribute 0.
    """
    time = np.asarray(time, dtype=np.float64)
    status = np.asarray(status, dtype=np.float64)
    n = time.size
    s_hat = curves.survival([t_star])[:, 0]
    G = km_censoring_fit(time, status)
    g_i = G.evaluate(time)
    g_star = float(G.evaluate([t_star])[0])

    event_before = (time <= t_star) & (status > 0)
    at_risk = time > t_star
    total = 0.0
    n_skipped = 0
    for i in range(n):
        if event_before[i]:
            if g_i[i] > 0:
                total += s_hat[i] ** 2 / g_i[i]
            else:
                n_skipped += 1
        elif at_risk[i]:
            if g_star > 0:
                total += (1.0 - s_hat[i]) ** 2 / g_star
            else:
                n_skipped += 1
    return _mv(f"brier(t={t_star:g})", total / n)


def integrated_brier(curves, time, status, grid) -> MetricValue:
    """Trapezoid average of the IPCW Brier score over the time grid."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size < 2:
        raise MetricError("integrated brier needs a grid of at least two times")
    values = [brier_survival(curves, time, status, float(t)).estimate for t in grid]
    ibs = float(_trapezoid(values, grid) / (grid[-1] - grid[0]))
    return MetricValue("ibs", ibs, DIRECTIONS["ibs"])


def _mean_curve_rmst(curves, tau: float) -> float:
    knots = curves.knots()
    if knots is not None:
        cut = np.concatenate(([x for x in knots if 0 < x < tau], [tau]))
        edges = np.concatenate(([0.0], cut))
        # right-continuous step curve: exact left-point integration on its knots
        heights = np.concatenate(
            ([1.0], curves.survival(cut[:-1]).mean(axis=0))) if cut.size > 1 else np.array([1.0])
        return float(np.sum(heights * np.diff(edges)))
    # smooth family: composite Simpson on a dense grid
    m = 4096
    ts = np.linspace(0.0, tau, m + 1)
    s = np.empty(m + 1)
    s[0] = 1.0
    s[1:] = curves.survival(ts[1:]).mean(axis=0)
    h = tau / m
    return float(h / 3.0 * (s[0] + s[-1] + 4.0 * s[1:-1:2].sum() + 2.0 * s[2:-1:2].sum()))


def rmst_diff(curves, time, status, tau: float) -> MetricValue:
    """|RMST of the observed KM curve - RMST of the mean predicted curve| on [0, tau]."""
    km = km_fit(time, status)
    observed = rmst(km, tau)
    predicted = _mean_curve_rmst(curves, tau)
    return _mv("rmst_diff", abs(observed - predicted))


# ----------------------------------------------------------------------------
# Bootstrap confidence intervals


def bootstrap_ci(frame, metric_fn: Callable[[object], float | None], B: int = 500,
                 level: float = 0.95, seed: int = 0,
                 max_redraws: int = 10) -> tuple[float, float, int, int]:
    """Percentile interval over B row-resampled recomputations.

    Degenerate resamples (metric undefined) are redrawn up to ``max_redraws``
    times, then dropped; the dropped count is reported.  Each replicate draws
    from its own seed substream, so results are independent of evaluation
    order.
    """
    if B < 2:
        raise MetricError("bootstrap needs B >= 2")
    n = frame.n
    values = []
    n_dropped = 0
    for b in range(B):
        rng = substream(seed, b)
        value = None
        for _ in range(max_redraws + 1):
            idx = rng.integers(0, n, size=n)
            value = metric_fn(frame.take(idx))
            if value is not None:
                break
        if value is None:
            n_dropped += 1
        else:
            values.append(value)
    if not values:
        raise MetricError("all bootstrap resamples were degenerate")
    alpha = (1.0 - level) / 2.0
    lower, upper = np.quantile(np.asarray(values), [alpha, 1.0 - alpha])
    return float(lower), float(upper), B, n_dropped


def with_bootstrap_ci(metric: MetricValue, frame, metric_fn, B: int = 500,
                      level: float = 0.95, seed: int = 0) -> MetricValue:
    if not metric.defined:
        return metric
    try:
        lower, upper, n_boot, _ = bootstrap_ci(frame, metric_fn, B=B, level=level, seed=seed)
    except MetricError:
        return metric
    return replace(metric, lower=lower, upper=upper, n_boot=n_boot)
