"""Typed, immutable tabular data model.

Columns carry a kind (numeric or categorical), a role (predictor, outcome,
id, group, order, time, status) and, for categoricals, an ordered level list
that is part of the schema: row subsetting never changes it.  Missing values
are NaN for numeric columns and the sentinel code -1 for categoricals.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

MISSING_CODE = -1


class ColumnKind(Enum):
    NUMERIC = "numeric"
    CATEGORICAL = "categorical"


class Role(Enum):
    PREDICTOR = "predictor"
    OUTCOME = "outcome"
    ID = "id"
    GROUP = "group"
    ORDER = "order"
    TIME = "time"
    STATUS = "status"


class TaskKind(Enum):
    CLASSIFICATION = "classification"
    REGRESSION = "regression"
    SURVIVAL = "survival"


class SchemaError(ValueError):
    """A dataset violates its declared schema or role assignments."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Column:
    name: str
    kind: ColumnKind
    role: Role
    values: np.ndarray
    levels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind is ColumnKind.NUMERIC:
            v = _frozen(np.asarray(self.values, dtype=np.float64))
            if self.levels:
                raise SchemaError(f"column {self.name!r}: numeric columns have no levels")
        else:
            v = _frozen(np.asarray(self.values, dtype=np.int64))
            if len(set(self.levels)) != len(self.levels):
                raise SchemaError(f"column {self.name!r}: duplicate categorical levels")
            if v.size and (v.min() < MISSING_CODE or v.max() >= len(self.levels)):
                raise SchemaError(f"column {self.name!r}: level code out of range")
        object.__setattr__(self, "values", v)

    @property
    def n_missing(self) -> int:
        if self.kind is ColumnKind.NUMERIC:
            return int(np.isnan(self.values).sum())
        return int((self.values == MISSING_CODE).sum())


def numeric_column(name: str, values, role: Role = Role.PREDICTOR) -> Column:
    return Column(name, ColumnKind.NUMERIC, role, np.asarray(values, dtype=np.float64))


def categorical_column(name: str, codes, levels: Sequence[str], role: Role = Role.PREDICTOR) -> Column:
    return Column(name, ColumnKind.CATEGORICAL, role, np.asarray(codes, dtype=np.int64), tuple(levels))


def categorical_from_strings(name: str, raw: Sequence, role: Role = Role.PREDICTOR,
                             missing_tokens: Iterable[str] = ("", "NA")) -> Column:
    """Build a categorical column; levels ordered by first appearance."""
    missing = set(missing_tokens)
    levels: list[str] = []
    index: dict[str, int] = {}
    codes = np.empty(len(raw), dtype=np.int64)
    for i, v in enumerate(raw):
        if v is None or str(v) in missing:
            codes[i] = MISSING_CODE
            continue
        s = str(v)
        if s not in index:
            index[s] = len(levels)
            levels.append(s)
        codes[i] = index[s]
    return categorical_column(name, codes, levels, role)


@dataclass(frozen=True)
class Dataset:
    columns: tuple[Column, ...]

    def __post_init__(self):
        names = [c.name for c in self.columns]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise SchemaError(f"duplicate column names: {sorted(dupes)}")
        lengths = {len(c.values) for c in self.columns}
        if len(lengths) > 1:
            raise SchemaError("columns differ in length")
        object.__setattr__(self, "columns", tuple(self.columns))

    @property
    def n_rows(self) -> int:
        return len(self.columns[0].values) if self.columns else 0

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    def has_column(self, name: str) -> bool:
        return any(c.name == name for c in self.columns)

    def column(self, name: str) -> Column:
        for c in self.columns:
            if c.name == name:
                return c
        raise SchemaError(f"unknown column {name!r}")

    def columns_with_role(self, role: Role) -> tuple[Column, ...]:
        return tuple(c for c in self.columns if c.role is role)

    def replace_column(self, name: str, new: Column) -> "Dataset":
        cols = tuple(new if c.name == name else c for c in self.columns)
        return Dataset(cols)

    def with_role(self, name: str, role: Role) -> "Dataset":
        return self.replace_column(name, replace(self.column(name), role=role))

    def drop_columns(self, names: Iterable[str]) -> "Dataset":
        drop = set(names)
        return Dataset(tuple(c for c in self.columns if c.name not in drop))


def make_dataset(columns: Sequence[Column]) -> Dataset:
    return Dataset(tuple(columns))


def subset_rows(dataset: Dataset, ids) -> Dataset:
    """Row projection in the requested order; column metadata and level lists unchanged."""
    ids = np.asarray(ids, dtype=np.int64)
    n = dataset.n_rows
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"row index out of range [0, {n})")
    return Dataset(tuple(replace(c, values=c.values[ids]) for c in dataset.columns))


@dataclass(frozen=True)
class ColumnSummary:
    name: str
    kind: ColumnKind
    n: int
    n_missing: int
    mean: float | None = None
    sd: float | None = None
    median: float | None = None
    level_counts: tuple[tuple[str, int], ...] = ()


def column_summary(dataset: Dataset, name: str) -> ColumnSummary:
    """Per-column statistics ignoring missing entries; sd uses the n-1 denominator."""
    col = dataset.column(name)
    n = dataset.n_rows
    if col.kind is ColumnKind.CATEGORICAL:
        counts = tuple(
            (lev, int((col.values == i).sum())) for i, lev in enumerate(col.levels)
        )
        return ColumnSummary(name, col.kind, n, col.n_missing, level_counts=counts)
    v = col.values[~np.isnan(col.values)]
    if v.size == 0:
        return ColumnSummary(name, col.kind, n, n)
    sd = float(np.std(v, ddof=1)) if v.size > 1 else None
    return ColumnSummary(
        name, col.kind, n, col.n_missing,
        mean=float(np.mean(v)), sd=sd, median=float(np.median(v)),
    )


def validate_schema(dataset: Dataset, task: TaskKind) -> Dataset:
    """Check role assignments against the task; idempotent, returns the dataset.

    Rejects missing outcomes, status values outside {0, 1}, nonpositive or
    missing times, and contradictory role assignments.
    """
    if not dataset.columns or dataset.n_rows == 0:
        raise SchemaError("dataset is empty")

    outcomes = dataset.columns_with_role(Role.OUTCOME)
    times = dataset.columns_with_role(Role.TIME)
    statuses = dataset.columns_with_role(Role.STATUS)

    if task is TaskKind.SURVIVAL:
        if outcomes:
            raise SchemaError("survival tasks use time/status roles, not an outcome column")
        if len(times) != 1 or len(statuses) != 1:
            raise SchemaError("survival requires exactly one time and one status column")
        tcol, scol = times[0], statuses[0]
        if tcol.kind is not ColumnKind.NUMERIC or scol.kind is not ColumnKind.NUMERIC:
            raise SchemaError("time and status columns must be numeric")
        s = scol.values
        if np.isnan(s).any() or not np.isin(s[~np.isnan(s)], (0.0, 1.0)).all():
            raise SchemaError("status must be 0/1")
        t = tcol.values
        if np.isnan(t).any() or (t <= 0).any():
            raise SchemaError("time must be positive and non-missing")
    else:
        if times or statuses:
            raise SchemaError("time/status roles require a survival task")
        if len(outcomes) != 1:
            raise SchemaError(f"expected exactly one outcome column, found {len(outcomes)}")
        out = outcomes[0]
        if task is TaskKind.CLASSIFICATION:
            if out.kind is not ColumnKind.CATEGORICAL:
                raise SchemaError("classification requires a categorical outcome")
            if (out.values == MISSING_CODE).any():
                raise SchemaError("outcome has missing values")
        else:
            if out.kind is not ColumnKind.NUMERIC:
                raise SchemaError("regression requires a numeric outcome")
            if np.isnan(out.values).any():
                raise SchemaError("outcome has missing values")

    for role in (Role.GROUP, Role.ORDER):
        if len(dataset.columns_with_role(role)) > 1:
            raise SchemaError(f"at most one {role.value} column is allowed")
    return dataset
