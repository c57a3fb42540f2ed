"""Single CART trees and bagged random forests on the shared lockstep builder."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .._rng import substream
from ._tree_builder import TreeEnsemble, bin_matrix, build_ensemble, build_tree
from .base import FitError


@dataclass(frozen=True)
class TreeParams:
    tree: TreeEnsemble
    n_classes: int  # 0 for regression


@dataclass(frozen=True)
class ForestParams:
    ensemble: TreeEnsemble
    n_classes: int
    mtry: int
    min_n: int


def default_mtry(p: int, classification: bool) -> int:
    return max(1, int(math.isqrt(p))) if classification else max(1, p // 3)


def fit_decision_tree(X: np.ndarray, y: np.ndarray, classification: bool,
                      n_classes: int = 0, max_depth: int = 10,
                      min_n: int = 2) -> TreeParams:
    """Greedy CART: Gini for classification, variance for regression."""
    if min_n < 1:
        raise FitError("min_n must be >= 1")
    binned = bin_matrix(X)
    if classification:
        tree = build_tree(binned, "gini", y=y, n_classes=n_classes,
                          max_depth=max_depth, min_n=min_n)
    else:
        tree = build_tree(binned, "variance", y=y, max_depth=max_depth, min_n=min_n)
    return TreeParams(tree, n_classes if classification else 0)


FOREST_MAX_DEPTH = 16


def fit_random_forest(X: np.ndarray, y: np.ndarray, classification: bool,
                      n_classes: int = 0, trees: int = 100, mtry: int | None = None,
                      min_n: int | None = None, max_depth: int = FOREST_MAX_DEPTH,
                      seed: int = 0) -> ForestParams:
    """Bagged CART trees on bootstrap row samples with per-split feature subsampling.

    Class probabilities are the mean of leaf class proportions across trees;
    regression predictions the mean of leaf means.  Deterministic under a fixed
    seed: tree t draws its bootstrap weights and split-time feature subsets
    from its own substream.
    """
    if trees < 1:
        raise FitError("trees must be >= 1")
    n, p = X.shape
    if mtry is None:
        mtry = default_mtry(p, classification)
    if min_n is None:
        min_n = 10 if classification else 20
    binned = bin_matrix(X)
    rngs = [substream(seed, t) for t in range(trees)]
    weights = np.empty((trees, n))
    for t, rng in enumerate(rngs):
        weights[t] = np.bincount(rng.integers(0, n, size=n), minlength=n)
    if classification:
        ens = build_ensemble(binned, "gini", y=y, n_classes=n_classes, weights=weights,
                             max_depth=max_depth, min_n=min_n, mtry=mtry, rngs=rngs)
    else:
        ens = build_ensemble(binned, "variance", y=y, weights=weights,
                             max_depth=max_depth, min_n=min_n, mtry=mtry, rngs=rngs)
    return ForestParams(ens, n_classes if classification else 0, mtry, min_n)


def forest_predict(params: ForestParams, X: np.ndarray) -> np.ndarray:
    return params.ensemble.predict_mean(X)
