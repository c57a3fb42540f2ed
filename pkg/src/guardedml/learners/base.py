"""Shared learner plumbing: errors, the fitted-model wrapper, prediction kinds."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class FitError(ValueError):
    """Model cannot be fitted or a prediction contract is violated."""


class PredictionKind(Enum):
    CLASS_PROB = "class_prob"
    NUMERIC = "numeric"
    RISK_SCORE = "risk_score"
    SURVIVAL_CURVE = "survival_curve"
    LOG_TIME = "log_time"


@dataclass(frozen=True)
class FittedModel:
    algorithm: str
    payload: object
    signature: tuple[str, ...]
    task: str
    flags: tuple[str, ...] = ()


def check_features(X: np.ndarray, where: str = "features") -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise FitError(f"{where} must be a 2-D matrix")
    if np.isnan(X).any():
        raise FitError(f"missing values in {where}; run imputation first")
    return X
