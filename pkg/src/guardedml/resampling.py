"""Resampling plans as pure index structures, plus structural guards.

Every generator returns ``ResampleSplit`` objects over 0-based row ids.
``check_full_analysis`` is the no-holdout guard: a split whose analysis ids
cover every row (or whose assessment is empty) is a hard error.
"""
from __future__ import annotations

import warnings as _warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._rng import mix64, substream


class GuardError(ValueError):
    """A resampling plan violates a structural guard."""


class ResamplingWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ResampleSplit:
    analysis: np.ndarray
    assessment: np.ndarray
    label: str

    def __post_init__(self):
        a = np.asarray(self.analysis, dtype=np.int64)
        b = np.asarray(self.assessment, dtype=np.int64)
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "analysis", a)
        object.__setattr__(self, "assessment", b)


@dataclass(frozen=True)
class ResamplingSpec:
    method: str = "cv"
    folds: int = 5
    repeats: int = 1
    times: int = 25                     # bootstrap resamples
    stratify: bool = False
    group_col: str | None = None
    order_col: str | None = None
    initial_window: int | None = None
    assess_window: int | None = None
    step: int = 1
    expanding: bool = False
    validation_fraction: float = 0.25
    custom_splits: tuple[ResampleSplit, ...] = ()


METHODS = ("cv", "repeatedcv", "boot", "grouped_cv", "blocked_cv",
           "rolling_origin", "validation_split", "none", "custom", "nested_cv")


def check_full_analysis(split: ResampleSplit, n: int) -> None:
    """Guard against pathological splits: no holdout must remain."""
    if split.assessment.size == 0:
        raise GuardError(f"split {split.label!r}: assessment set is empty, no holdout remains")
    if np.unique(split.analysis).size >= n:
        raise GuardError(
            f"split {split.label!r}: analysis indices cover the full dataset, no holdout remains")


def check_group_integrity(splits: Sequence[ResampleSplit], groups) -> list[tuple[str, object]]:
    """Every (split, group) pair where the group leaks across the analysis/assessment line."""
    groups = np.asarray(groups)
    violations = []
    for s in splits:
        leaked = np.intersect1d(np.unique(groups[s.analysis]), np.unique(groups[s.assessment]))
        violations.extend((s.label, g) for g in leaked)
    return violations


def _stratified_fold_of_row(n: int, folds: int, strata, rng) -> np.ndarray:
    """Fold assignment with per-stratum counts per fold differing by at most 1."""
    strata = np.asarray(strata)
    fold_of = np.empty(n, dtype=np.int64)
    values, inverse = np.unique(strata, return_inverse=True)
    buckets = [np.flatnonzero(inverse == i) for i in range(len(values))]
    small = [b for b in buckets if b.size < folds]
    kept = [b for b in buckets if b.size >= folds]
    if small:
        _warnings.warn(
            f"{len(small)} stratum/strata smaller than {folds} folds; pooled",
            ResamplingWarning)
        kept.append(np.concatenate(small))
    loads = np.zeros(folds, dtype=np.int64)
    for rows in kept:
        rows = rng.permutation(rows)
        start = int(np.argmin(loads))  # begin each stratum at the lightest fold
        for j, r in enumerate(rows):
            f = (start + j) % folds
            fold_of[r] = f
            loads[f] += 1
    return fold_of


def make_vfold(n: int, folds: int, strata=None, seed: int = 0) -> list[ResampleSplit]:
    """Partition rows into ``folds`` assessment sets with sizes differing by <= 1."""
    if folds < 2:
        raise GuardError("cv requires folds >= 2")
    if folds > n:
        raise GuardError(f"folds={folds} exceeds n={n}")
    rng = substream(seed)
    if strata is None:
        perm = rng.permutation(n)
        chunks = np.array_split(perm, folds)
        assess = [np.sort(c) for c in chunks]
    else:
        fold_of = _stratified_fold_of_row(n, folds, strata, rng)
        assess = [np.flatnonzero(fold_of == f) for f in range(folds)]
    all_rows = np.arange(n)
    return [
        ResampleSplit(np.setdiff1d(all_rows, a), a, f"Fold{k + 1}")
        for k, a in enumerate(assess)
    ]


def make_repeated_vfold(n: int, folds: int, repeats: int, strata=None,
                        seed: int = 0) -> list[ResampleSplit]:
    """repeats x folds splits; each repeat is an independent shuffle."""
    if repeats < 1:
        raise GuardError("repeats must be >= 1")
    out = []
    for r in range(repeats):
        for s in make_vfold(n, folds, strata=strata, seed=mix64(seed, r)):
            out.append(ResampleSplit(s.analysis, s.assessment, f"Rep{r + 1}.{s.label}"))
    return out


def make_bootstrap(n: int, times: int, seed: int = 0) -> list[ResampleSplit]:
    """Analysis = n draws with replacement; assessment = out-of-bag rows."""
    if times < 1:
        raise GuardError("times must be >= 1")
    out = []
    all_rows = np.arange(n)
    for b in range(times):
        rng = substream(seed, b)
        for attempt in range(100):
            draw = np.sort(rng.integers(0, n, size=n))
            oob = np.setdiff1d(all_rows, draw)
            if oob.size > 0:
                out.append(ResampleSplit(draw, oob, f"Boot{b + 1}"))
                break
        else:
            raise GuardError(
                f"bootstrap resample {b + 1}: out-of-bag set empty after 100 redraws")
    return out


def make_group_vfold(groups, v: int, seed: int = 0) -> list[ResampleSplit]:
    """Groups are randomly partitioned into v folds; all rows of a group stay together."""
    groups = np.asarray(groups)
    n = groups.size
    distinct = np.unique(groups)
    if v < 2:
        raise GuardError("grouped_cv requires v >= 2")
    if v > distinct.size:
        raise GuardError(f"v={v} exceeds the {distinct.size} distinct group(s)")
    rng = substream(seed)
    perm = rng.permutation(distinct)
    fold_groups = np.array_split(perm, v)
    all_rows = np.arange(n)
    out = []
    for k, gs in enumerate(fold_groups):
        a = np.flatnonzero(np.isin(groups, gs))
        out.append(ResampleSplit(np.setdiff1d(all_rows, a), a, f"Fold{k + 1}"))
    return out


def _require_complete_order(order) -> np.ndarray:
    order = np.asarray(order, dtype=np.float64)
    if np.isnan(order).any():
        raise GuardError("ordering required by the chosen design has missing values")
    return order


def make_blocked(order, n_blocks: int) -> list[ResampleSplit]:
    """Rows sorted by order value and cut into contiguous near-equal blocks."""
    order = _require_complete_order(order)
    n = order.size
    if n_blocks < 2:
        raise GuardError("blocked_cv requires n_blocks >= 2")
    if n_blocks > n:
        raise GuardError(f"n_blocks={n_blocks} exceeds n={n}")
    sorted_idx = np.argsort(order, kind="stable")  # ties keep input order
    blocks = np.array_split(sorted_idx, n_blocks)
    all_rows = np.arange(n)
    return [
        ResampleSplit(np.setdiff1d(all_rows, np.sort(b)), np.sort(b), f"Block{k + 1}")
        for k, b in enumerate(blocks)
    ]


def make_rolling_origin(order, initial_window: int, assess_window: int,
                        step: int = 1, expanding: bool = False) -> list[ResampleSplit]:
    """Time-ordered slices; the analysis window always precedes its assessment window."""
    order = _require_complete_order(order)
    n = order.size
    if initial_window < 1 or assess_window < 1 or step < 1:
        raise GuardError("window sizes and step must be positive")
    if initial_window + assess_window > n:
        raise GuardError(
            f"initial_window + assess_window = {initial_window + assess_window} exceeds n={n}")
    sorted_idx = np.argsort(order, kind="stable")
    out = []
    s = 0
    while s * step + initial_window + assess_window <= n:
        lo = 0 if expanding else s * step
        mid = s * step + initial_window
        hi = mid + assess_window
        out.append(ResampleSplit(
            np.sort(sorted_idx[lo:mid]), np.sort(sorted_idx[mid:hi]), f"Slice{s + 1}"))
        s += 1
    return out


def make_validation_split(n: int, fraction: float = 0.25, strata=None,
                          seed: int = 0) -> list[ResampleSplit]:
    """Single shuffled split with ``fraction`` of rows held out for assessment."""
    if not 0 < fraction < 1:
        raise GuardError("validation fraction must lie in (0, 1)")
    n_assess = min(max(1, int(round(n * fraction))), n - 1)
    rng = substream(seed)
    if strata is None:
        perm = rng.permutation(n)
        assess = np.sort(perm[:n_assess])
    else:
        folds = max(2, int(round(1.0 / fraction)))
        fold_of = _stratified_fold_of_row(n, folds, strata, rng)
        assess = np.flatnonzero(fold_of == 0)
    analysis = np.setdiff1d(np.arange(n), assess)
    return [ResampleSplit(analysis, assess, "Validation")]


def make_splits(spec: ResamplingSpec, n: int, strata=None, groups=None,
                order=None, seed: int = 0) -> list[ResampleSplit]:
    """Dispatch on the spec method; every returned split passes the guards."""
    m = spec.method
    if m not in METHODS:
        raise GuardError(f"unknown resampling method {m!r}")
    if m == "nested_cv":
        raise GuardError("nested_cv is unsupported")
    if m == "none":
        return []
    strata = strata if spec.stratify else None
    if m == "cv":
        splits = make_vfold(n, spec.folds, strata=strata, seed=seed)
    elif m == "repeatedcv":
        splits = make_repeated_vfold(n, spec.folds, spec.repeats, strata=strata, seed=seed)
    elif m == "boot":
        splits = make_bootstrap(n, spec.times, seed=seed)
    elif m == "grouped_cv":
        if groups is None:
            raise GuardError("grouped_cv requires a group column")
        splits = make_group_vfold(groups, spec.folds, seed=seed)
    elif m == "blocked_cv":
        if order is None:
            raise GuardError("blocked_cv requires an order column")
        splits = make_blocked(order, spec.folds)
    elif m == "rolling_origin":
        if order is None:
            raise GuardError("rolling_origin requires an order column")
        if spec.initial_window is None or spec.assess_window is None:
            raise GuardError("rolling_origin requires initial_window and assess_window")
        splits = make_rolling_origin(order, spec.initial_window, spec.assess_window,
                                     step=spec.step, expanding=spec.expanding)
    elif m == "validation_split":
        splits = make_validation_split(n, spec.validation_fraction, strata=strata, seed=seed)
    else:  # custom
        splits = list(spec.custom_splits)
        for s in splits:
            if s.analysis.size and (s.analysis.min() < 0 or s.analysis.max() >= n):
                raise GuardError(f"split {s.label!r}: analysis index out of range")
            if s.assessment.size and (s.assessment.min() < 0 or s.assessment.max() >= n):
                raise GuardError(f"split {s.label!r}: assessment index out of range")
    for s in splits:
        check_full_analysis(s, n)
    return splits
