"""Uniform fit/predict contract over all supported algorithms.

``fit_model`` dispatches on the algorithm name and returns a ``FittedModel``
whose prediction kinds are listed in ``SUPPORTED_KINDS``; asking for anything
else fails fast.  Predict rejects feature matrices whose column signature
differs from training.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .. import survival_stats
from .base import FitError, FittedModel, PredictionKind, check_features
from . import aft, cox, linear, trees
from .aft import AftIntervalTargets, build_aft_interval_targets, fit_gbm, fit_weibull_aft
from .cox import fit_cox
from .linear import fit_elastic_net, fit_linear, fit_logistic
from .trees import fit_decision_tree, fit_random_forest

__all__ = [
    "AftIntervalTargets", "FitError", "FittedModel", "ModelSpec", "PredictionKind",
    "build_aft_interval_targets", "fit_model", "predict", "supported_kinds",
    "validate_model_spec",
]

CLASSIFICATION_ALGOS = ("logistic_reg", "decision_tree", "rand_forest")
REGRESSION_ALGOS = ("linear_reg", "elastic_net", "decision_tree", "rand_forest", "gbm")
SURVIVAL_ALGOS = ("cox_ph", "penalized_cox", "weibull_aft", "piecewise_exp", "gbm")

_PARAM_RANGES = {
    "trees": lambda v: v >= 1,
    "mtry": lambda v: v >= 1,
    "min_n": lambda v: v >= 1,
    "min_leaf": lambda v: v >= 1,
    "max_depth": lambda v: v >= 1,
    "penalty": lambda v: v >= 0,
    "mixture": lambda v: 0 <= v <= 1,
    "learn_rate": lambda v: v > 0,
    "rounds": lambda v: v >= 0,
    "sigma": lambda v: v > 0,
    "max_iter": lambda v: v >= 1,
    "max_passes": lambda v: v >= 1,
    "tol": lambda v: v > 0,
    "cutpoints": lambda v: True,
    "threshold": lambda v: 0 < v < 1,
}

_ALGO_PARAMS = {
    "logistic_reg": ("max_iter", "tol"),
    "linear_reg": (),
    "elastic_net": ("penalty", "mixture", "tol", "max_passes"),
    "decision_tree": ("max_depth", "min_n"),
    "rand_forest": ("trees", "mtry", "min_n", "max_depth"),
    "cox_ph": ("tol", "max_iter"),
    "penalized_cox": ("penalty", "tol", "max_iter"),
    "weibull_aft": ("tol", "max_iter"),
    "piecewise_exp": ("cutpoints",),
    "gbm": ("rounds", "learn_rate", "max_depth", "min_leaf", "sigma"),
}


@dataclass(frozen=True)
class ModelSpec:
    algorithm: str
    params: dict
    tune: dict | None = None
    label: str | None = None

    @property
    def model_id(self) -> str:
        return self.label or self.algorithm


def validate_model_spec(spec: ModelSpec, task: str) -> None:
    valid = {"classification": CLASSIFICATION_ALGOS, "regression": REGRESSION_ALGOS,
             "survival": SURVIVAL_ALGOS}[task]
    if spec.algorithm not in valid:
        raise FitError(f"algorithm {spec.algorithm!r} is not supported for {task}")
    allowed = _ALGO_PARAMS[spec.algorithm]
    for source in (spec.params, spec.tune or {}):
        for name, value in source.items():
            if name not in allowed:
                raise FitError(f"{spec.algorithm}: unknown hyperparameter {name!r}")
            values = value if isinstance(value, (list, tuple)) else [value]
            for v in values:
                if not _PARAM_RANGES[name](v):
                    raise FitError(f"{spec.algorithm}: {name}={v!r} out of range")


# ----------------------------------------------------------------------------
# Survival-curve prediction objects


class SurvivalCurves:
    """Per-row survival curves evaluable at any t > 0."""

    def survival(self, times) -> np.ndarray:
        raise NotImplementedError

    def take(self, idx) -> "SurvivalCurves":
        raise NotImplementedError

    def knots(self) -> np.ndarray | None:
        """Jump points for step curves; None for smooth families."""
        return None

    def __len__(self) -> int:
        raise NotImplementedError


def _check_eval_times(times) -> np.ndarray:
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    if (times <= 0).any():
        raise FitError("survival curves are defined for t > 0")
    return times


class BreslowCurves(SurvivalCurves):
    def __init__(self, params: cox.CoxParams, risk: np.ndarray):
        self._params = params
        self._risk = risk

    def survival(self, times) -> np.ndarray:
        times = _check_eval_times(times)
        H0 = cox.cox_cumhaz_at(self._params, times)
        return np.exp(-np.outer(np.exp(self._risk), H0))

    def take(self, idx) -> "BreslowCurves":
        return BreslowCurves(self._params, self._risk[np.asarray(idx)])

    def knots(self) -> np.ndarray:
        return self._params.baseline_times

    def __len__(self) -> int:
        return self._risk.size


class WeibullCurves(SurvivalCurves):
    def __init__(self, location: np.ndarray, scale: float):
        self._location = location
        self._scale = scale

    def survival(self, times) -> np.ndarray:
        times = _check_eval_times(times)
        w = (np.log(times)[None, :] - self._location[:, None]) / self._scale
        return np.exp(-np.exp(np.clip(w, -700, 700)))

    def take(self, idx) -> "WeibullCurves":
        return WeibullCurves(self._location[np.asarray(idx)], self._scale)

    def __len__(self) -> int:
        return self._location.size


class NormalAftCurves(SurvivalCurves):
    def __init__(self, location: np.ndarray, scale: float):
        self._location = location
        self._scale = scale

    def survival(self, times) -> np.ndarray:
        times = _check_eval_times(times)
        z = (np.log(times)[None, :] - self._location[:, None]) / self._scale
        return special.ndtr(-z)

    def take(self, idx) -> "NormalAftCurves":
        return NormalAftCurves(self._location[np.asarray(idx)], self._scale)

    def __len__(self) -> int:
        return self._location.size


class PexpCurves(SurvivalCurves):
    """One shared baseline curve (the model has no covariates)."""

    def __init__(self, params: survival_stats.PexpParams, n: int):
        self._params = params
        self._n = n

    def survival(self, times) -> np.ndarray:
        times = _check_eval_times(times)
        s = survival_stats.pexp_survival(self._params, times)
        return np.tile(s, (self._n, 1))

    def take(self, idx) -> "PexpCurves":
        return PexpCurves(self._params, len(np.asarray(idx)))

    def __len__(self) -> int:
        return self._n


# ----------------------------------------------------------------------------
# Dispatch

SUPPORTED_KINDS = {
    ("logistic_reg", "classification"): (PredictionKind.CLASS_PROB,),
    ("decision_tree", "classification"): (PredictionKind.CLASS_PROB,),
    ("rand_forest", "classification"): (PredictionKind.CLASS_PROB,),
    ("linear_reg", "regression"): (PredictionKind.NUMERIC,),
    ("elastic_net", "regression"): (PredictionKind.NUMERIC,),
    ("decision_tree", "regression"): (PredictionKind.NUMERIC,),
    ("rand_forest", "regression"): (PredictionKind.NUMERIC,),
    ("gbm", "regression"): (PredictionKind.NUMERIC,),
    ("cox_ph", "survival"): (PredictionKind.RISK_SCORE, PredictionKind.SURVIVAL_CURVE),
    ("penalized_cox", "survival"): (PredictionKind.RISK_SCORE, PredictionKind.SURVIVAL_CURVE),
    ("weibull_aft", "survival"): (PredictionKind.RISK_SCORE, PredictionKind.SURVIVAL_CURVE,
                                  PredictionKind.LOG_TIME),
    ("piecewise_exp", "survival"): (PredictionKind.RISK_SCORE, PredictionKind.SURVIVAL_CURVE),
    ("gbm", "survival"): (PredictionKind.RISK_SCORE, PredictionKind.SURVIVAL_CURVE,
                          PredictionKind.LOG_TIME),
}


def supported_kinds(model: FittedModel) -> tuple[PredictionKind, ...]:
    return SUPPORTED_KINDS[(model.algorithm, model.task)]


def fit_model(algorithm: str, params: dict, X: np.ndarray, feature_names: tuple[str, ...],
              *, task: str, y_codes=None, n_levels: int = 0, y_numeric=None,
              time=None, status=None, seed: int = 0) -> FittedModel:
    X = check_features(X)
    params = dict(params)
    flags: tuple[str, ...] = ()

    if task == "classification":
        if algorithm == "logistic_reg":
            if n_levels != 2:
                raise FitError("logistic_reg requires a binary outcome")
            payload = fit_logistic(X, np.asarray(y_codes) == 1, **params)
            if payload.separation:
                flags = ("separation",)
        elif algorithm == "decision_tree":
            payload = fit_decision_tree(X, y_codes, True, n_classes=n_levels, **params)
        elif algorithm == "rand_forest":
            payload = fit_random_forest(X, y_codes, True, n_classes=n_levels,
                                        seed=seed, **params)
        else:
            raise FitError(f"{algorithm!r} does not support classification")
    elif task == "regression":
        y = np.asarray(y_numeric, dtype=np.float64)
        if algorithm == "linear_reg":
            payload = fit_linear(X, y, **params)
        elif algorithm == "elastic_net":
            params.setdefault("penalty", 0.01)
            params.setdefault("mixture", 0.5)
            payload = fit_elastic_net(X, y, **params)
        elif algorithm == "decision_tree":
            payload = fit_decision_tree(X, y, False, **params)
        elif algorithm == "rand_forest":
            payload = fit_random_forest(X, y, False, seed=seed, **params)
        elif algorithm == "gbm":
            payload = fit_gbm(X, y, "squared", seed=seed, **params)
        else:
            raise FitError(f"{algorithm!r} does not support regression")
    elif task == "survival":
        t = np.asarray(time, dtype=np.float64)
        s = np.asarray(status, dtype=np.float64)
        if algorithm == "cox_ph":
            payload = fit_cox(X, t, s, ridge=0.0, **params)
            if payload.monotone_likelihood:
                flags = ("monotone_likelihood",)
        elif algorithm == "penalized_cox":
            ridge = params.pop("penalty", 0.1)
            payload = fit_cox(X, t, s, ridge=ridge, **params)
            if payload.monotone_likelihood:
                flags = ("monotone_likelihood",)
        elif algorithm == "weibull_aft":
            payload = fit_weibull_aft(X, t, s, **params)
        elif algorithm == "piecewise_exp":
            cutpoints = params.pop("cutpoints", ())
            payload = survival_stats.fit_pexp(t, s, cutpoints)
        elif algorithm == "gbm":
            targets = build_aft_interval_targets(t, s)
            payload = fit_gbm(X, targets, "aft_normal", seed=seed, **params)
        else:
            raise FitError(f"{algorithm!r} does not support survival")
    else:
        raise FitError(f"unknown task {task!r}")
    return FittedModel(algorithm, payload, tuple(feature_names), task, flags)


def predict(model: FittedModel, X: np.ndarray, feature_names: tuple[str, ...],
            kind: PredictionKind):
    """Predictions under the uniform contract; unsupported kinds fail fast."""
    X = check_features(X)
    if tuple(feature_names) != model.signature:
        raise FitError(
            f"feature signature mismatch: trained on {model.signature}, got {tuple(feature_names)}")
    if kind not in supported_kinds(model):
        raise FitError(f"{model.algorithm!r} does not support prediction kind {kind.value!r}")

    alg, payload = model.algorithm, model.payload
    if kind is PredictionKind.CLASS_PROB:
        if alg == "logistic_reg":
            eta = payload.intercept + X @ payload.coef
            p1 = 1.0 / (1.0 + np.exp(-eta))
            return np.column_stack([1.0 - p1, p1])
        probs = (trees.forest_predict(payload, X) if alg == "rand_forest"
                 else payload.tree.predict(X))
        # guard against all-zero rows (empty-leaf corner): fall back to uniform
        totals = probs.sum(axis=1, keepdims=True)
        return np.where(totals > 0, probs / totals, 1.0 / probs.shape[1])

    if kind is PredictionKind.NUMERIC:
        if alg in ("linear_reg", "elastic_net"):
            return payload.intercept + X @ payload.coef
        if alg == "decision_tree":
            return payload.tree.predict(X)[:, 0]
        if alg == "rand_forest":
            return trees.forest_predict(payload, X)[:, 0]
        return aft.gbm_predict(payload, X)

    if kind is PredictionKind.LOG_TIME:
        if alg == "weibull_aft":
            return aft.weibull_location(payload, X)
        return aft.gbm_predict(payload, X)

    if kind is PredictionKind.RISK_SCORE:
        if alg in ("cox_ph", "penalized_cox"):
            return cox.cox_risk(payload, X)
        if alg == "piecewise_exp":
            return np.zeros(X.shape[0])
        # AFT models: shorter predicted log-time = higher risk
        return -predict(model, X, feature_names, PredictionKind.LOG_TIME)

    # survival curves
    if alg in ("cox_ph", "penalized_cox"):
        return BreslowCurves(payload, cox.cox_risk(payload, X))
    if alg == "weibull_aft":
        return WeibullCurves(aft.weibull_location(payload, X), payload.scale)
    if alg == "piecewise_exp":
        return PexpCurves(payload, X.shape[0])
    return NormalAftCurves(aft.gbm_predict(payload, X), payload.sigma)
