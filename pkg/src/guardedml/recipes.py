"""Ordered, declarative preprocessing with strict fit/apply separation.

``fit_recipe`` estimates every data-dependent parameter sequentially on
analysis rows (step k sees the output of steps 1..k-1) and returns a
``FittedRecipe`` holding only aggregate parameters, never row-level data.
``apply_recipe`` replays the steps with those frozen parameters on any
schema-compatible data.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable

import numpy as np

from . import dsl
from .dsl import AuditFinding, FrozenAggregates
from .tabular import (
    Column, ColumnKind, Dataset, MISSING_CODE, Role, numeric_column,
)

ZV_TOL = 1e-12

SELECTOR_TOKENS = ("all_numeric_predictors", "all_categorical_predictors", "all_predictors")


class StepKind(Enum):
    IMPUTE_MEDIAN = "impute_median"
    IMPUTE_MEAN = "impute_mean"
    NORMALIZE = "normalize"
    DUMMY_ENCODE = "dummy_encode"
    ZERO_VARIANCE_FILTER = "zero_variance_filter"
    ROLE_UPDATE = "role_update"
    CUSTOM_EXPR = "custom_expr"


@dataclass(frozen=True)
class Step:
    kind: StepKind
    columns: tuple[str, ...] | str = "all_numeric_predictors"
    target: str | None = None      # custom_expr output column
    expr_text: str | None = None   # custom_expr source
    role: Role | None = None       # role_update new role
    frozen: dict | None = None     # pre-frozen aggregates are an audit rejection (R4)


@dataclass(frozen=True)
class RecipeSpec:
    steps: tuple[Step, ...] = ()


def default_recipe(impute_method: str = "median") -> RecipeSpec:
    """Impute, dummy-encode, drop zero-variance columns, normalize."""
    impute = StepKind.IMPUTE_MEDIAN if impute_method == "median" else StepKind.IMPUTE_MEAN
    return RecipeSpec((
        Step(impute, "all_numeric_predictors"),
        Step(StepKind.DUMMY_ENCODE, "all_categorical_predictors"),
        Step(StepKind.ZERO_VARIANCE_FILTER, "all_predictors"),
        Step(StepKind.NORMALIZE, "all_numeric_predictors"),
    ))


class RecipeError(ValueError):
    """Recipe cannot be fitted or applied."""


class RecipeAuditError(ValueError):
    """Fit was attempted on a recipe with reject findings."""

    def __init__(self, findings: list[AuditFinding]):
        super().__init__("; ".join(f.render() for f in findings))
        self.findings = findings


def _select(step: Step, data: Dataset) -> list[str]:
    if isinstance(step.columns, str):
        token = step.columns
        if token == "all_numeric_predictors":
            return [c.name for c in data.columns
                    if c.role is Role.PREDICTOR and c.kind is ColumnKind.NUMERIC]
        if token == "all_categorical_predictors":
            return [c.name for c in data.columns
                    if c.role is Role.PREDICTOR and c.kind is ColumnKind.CATEGORICAL]
        if token == "all_predictors":
            return [c.name for c in data.columns if c.role is Role.PREDICTOR]
        raise RecipeError(f"unknown selector {token!r}")
    return list(step.columns)


_PROTECTED_ROLES = (Role.OUTCOME, Role.TIME, Role.STATUS)


def audit_recipe(spec: RecipeSpec, schema: Dataset | None) -> list[AuditFinding]:
    """Union of expression findings over custom steps plus structural rules.

    With ``schema=None`` (audit-only mode, no data read) column-existence
    checks are skipped; they run again with the schema before any fit.
    """
    findings: list[AuditFinding] = []
    names = set(schema.names) if schema is not None else None
    protected = (
        {c.name for c in schema.columns if c.role in _PROTECTED_ROLES}
        if schema is not None else set()
    )
    n_outcomes = len(schema.columns_with_role(Role.OUTCOME)) if schema is not None else 0

    for idx, step in enumerate(spec.steps):
        where = f"step {idx + 1} ({step.kind.value})"
        if isinstance(step.columns, tuple) and names is not None:
            for c in step.columns:
                if c not in names:
                    findings.append(AuditFinding(
                        "reject", "S1", f"{where}: selector names absent column {c!r}"))
        if isinstance(step.columns, str) and step.columns not in SELECTOR_TOKENS:
            findings.append(AuditFinding(
                "reject", "S1", f"{where}: unknown selector {step.columns!r}"))

        if step.kind is StepKind.ROLE_UPDATE:
            if step.role is None or not isinstance(step.columns, tuple) or len(step.columns) != 1:
                findings.append(AuditFinding(
                    "reject", "S2", f"{where}: role_update needs one column and a role"))
            elif step.role is Role.OUTCOME and n_outcomes >= 1:
                findings.append(AuditFinding(
                    "reject", "S2", f"{where}: would assign a second outcome"))
            if step.role is Role.OUTCOME:
                n_outcomes += 1

        if step.kind in (StepKind.IMPUTE_MEDIAN, StepKind.IMPUTE_MEAN, StepKind.NORMALIZE):
            if isinstance(step.columns, tuple) and schema is not None:
                for c in step.columns:
                    if c in names and schema.column(c).kind is not ColumnKind.NUMERIC:
                        findings.append(AuditFinding(
                            "reject", "S4", f"{where}: {c!r} is not numeric"))
                    if c in protected:
                        findings.append(AuditFinding(
                            "reject", "S3", f"{where}: step may not transform {c!r} (outcome role)"))
        if step.kind is StepKind.DUMMY_ENCODE and isinstance(step.columns, tuple) and schema is not None:
            for c in step.columns:
                if c in names and schema.column(c).kind is not ColumnKind.CATEGORICAL:
                    findings.append(AuditFinding(
                        "reject", "S4", f"{where}: {c!r} is not categorical"))

        if step.kind is StepKind.CUSTOM_EXPR:
            if step.expr_text is None or step.target is None:
                findings.append(AuditFinding(
                    "reject", "S4", f"{where}: custom_expr needs a target and an expression"))
                continue
            if step.frozen:
                findings.append(AuditFinding(
                    "reject", "R4",
                    f"{where}: expression arrived with pre-frozen aggregate values"))
            if step.target in protected:
                findings.append(AuditFinding(
                    "reject", "S3", f"{where}: custom_expr may not target {step.target!r}"))
            findings.extend(dsl.audit_expr(step.expr_text, columns=names))
            if schema is not None:
                try:
                    expr = dsl.parse_expr_lenient(step.expr_text)
                except dsl.ParseError:
                    continue  # already rejected by audit_expr
                used = dsl.column_refs(expr) & protected
                for c in sorted(used):
                    findings.append(AuditFinding(
                        "reject", "S3", f"{where}: outcome column {c!r} used in transform"))
    return findings


def rejects(findings: Iterable[AuditFinding]) -> list[AuditFinding]:
    return [f for f in findings if f.severity == "reject"]


# ----------------------------------------------------------------------------
# Fitted form


@dataclass(frozen=True)
class FittedStep:
    step: Step
    params: tuple  # step-specific frozen parameters, hashable


@dataclass(frozen=True)
class FittedRecipe:
    steps: tuple[FittedStep, ...]
    n_analysis_rows: int
    warnings: tuple[str, ...] = ()

    def fingerprint(self) -> str:
        """Stable hash of every frozen parameter; differs whenever any
        recipe-relevant statistic of the analysis data differs."""
        h = hashlib.sha256()
        for fs in self.steps:
            h.update(fs.step.kind.value.encode())
            h.update(repr(fs.step.columns).encode())
            h.update(repr(fs.params).encode())
        return h.hexdigest()


def _fit_impute(data: Dataset, cols: list[str], how: str):
    params = []
    for name in cols:
        col = data.column(name)
        if col.kind is not ColumnKind.NUMERIC:
            raise RecipeError(f"impute target {name!r} is not numeric")
        v = col.values[~np.isnan(col.values)]
        if v.size == 0:
            raise RecipeError(f"impute target {name!r} is all-missing")
        params.append((name, float(np.median(v) if how == "median" else np.mean(v))))
    return tuple(params)


def _apply_impute(data: Dataset, params) -> Dataset:
    for name, value in params:
        col = data.column(name)
        filled = np.where(np.isnan(col.values), value, col.values)
        data = data.replace_column(name, replace(col, values=filled))
    return data


def _fit_normalize(data: Dataset, cols: list[str], warnings: list[str]):
    params = []
    for name in cols:
        col = data.column(name)
        v = col.values[~np.isnan(col.values)]
        center = float(np.mean(v)) if v.size else 0.0
        scale = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
        if not np.isfinite(scale) or scale < ZV_TOL:
            warnings.append(f"normalize: zero-variance column {name!r} dropped")
            params.append((name, None, None))  # drop marker
        else:
            params.append((name, center, scale))
    return tuple(params)


def _apply_normalize(data: Dataset, params) -> Dataset:
    drops = [name for name, c, s in params if c is None]
    for name, center, scale in params:
        if center is None:
            continue
        col = data.column(name)
        data = data.replace_column(name, replace(col, values=(col.values - center) / scale))
    return data.drop_columns(drops)


def _fit_dummy(data: Dataset, cols: list[str]):
    params = []
    for name in cols:
        col = data.column(name)
        if col.kind is not ColumnKind.CATEGORICAL:
            raise RecipeError(f"dummy_encode target {name!r} is not categorical")
        params.append((name, tuple(col.levels)))
    return tuple(params)


def _apply_dummy(data: Dataset, params, warnings: list[str]) -> Dataset:
    for name, levels in params:
        col = data.column(name)
        codes = col.values
        unseen = codes >= len(levels)
        if unseen.any():
            warnings.append(
                f"dummy_encode: {int(unseen.sum())} row(s) of {name!r} carry an unseen "
                "level; encoded as all-zero indicators")
        new_cols = []
        # reference coding: first level maps to the all-zero vector
        for j, lev in enumerate(levels[1:], start=1):
            ind = (codes == j).astype(np.float64)
            new_cols.append(numeric_column(f"{name}_{lev}", ind, role=col.role))
        cols_out: list[Column] = []
        for c in data.columns:
            if c.name == name:
                cols_out.extend(new_cols)
            else:
                cols_out.append(c)
        data = Dataset(tuple(cols_out))
    return data


def _fit_zv(data: Dataset, cols: list[str], warnings: list[str]):
    drops = []
    for name in cols:
        col = data.column(name)
        if col.kind is ColumnKind.CATEGORICAL:
            present = col.values[col.values != MISSING_CODE]
            if np.unique(present).size <= 1:
                drops.append(name)
            continue
        v = col.values[~np.isnan(col.values)]
        if v.size == 0 or np.unique(v).size <= 1 or float(np.std(v, ddof=1) if v.size > 1 else 0.0) < ZV_TOL:
            drops.append(name)
    if drops:
        warnings.append(f"zero_variance_filter: dropped {drops}")
    return tuple(drops)


def _apply_custom(data: Dataset, step: Step, expr, frozen: FrozenAggregates,
                  warnings: list[str]) -> Dataset:
    values, eval_warnings = dsl.apply_expr(expr, frozen, data)
    warnings.extend(f"custom_expr {step.target!r}: {w.message}" for w in eval_warnings)
    new = numeric_column(step.target, values, role=Role.PREDICTOR)
    if data.has_column(step.target):
        return data.replace_column(step.target, new)
    return Dataset(data.columns + (new,))


def fit_recipe(spec: RecipeSpec, analysis: Dataset) -> FittedRecipe:
    """Estimate step parameters sequentially on analysis rows only."""
    bad = rejects(audit_recipe(spec, analysis))
    if bad:
        raise RecipeAuditError(bad)
    if analysis.n_rows == 0:
        raise RecipeError("analysis set is empty")

    current = analysis
    fitted: list[FittedStep] = []
    warnings: list[str] = []
    for step in spec.steps:
        if step.kind is StepKind.ROLE_UPDATE:
            params = (step.columns[0], step.role.value)
            current = current.with_role(step.columns[0], step.role)
        elif step.kind in (StepKind.IMPUTE_MEDIAN, StepKind.IMPUTE_MEAN):
            how = "median" if step.kind is StepKind.IMPUTE_MEDIAN else "mean"
            params = _fit_impute(current, _select(step, current), how)
            current = _apply_impute(current, params)
        elif step.kind is StepKind.NORMALIZE:
            params = _fit_normalize(current, _select(step, current), warnings)
            current = _apply_normalize(current, params)
        elif step.kind is StepKind.DUMMY_ENCODE:
            params = _fit_dummy(current, _select(step, current))
            current = _apply_dummy(current, params, warnings)
        elif step.kind is StepKind.ZERO_VARIANCE_FILTER:
            params = _fit_zv(current, _select(step, current), warnings)
            current = current.drop_columns(params)
        elif step.kind is StepKind.CUSTOM_EXPR:
            expr = dsl.parse_expr(step.expr_text)
            frozen = dsl.fit_expr(expr, current)
            params = (step.expr_text, frozen.values)
            current = _apply_custom(current, step, expr, frozen, warnings)
        else:  # pragma: no cover - enum is closed
            raise RecipeError(f"unhandled step kind {step.kind}")
        fitted.append(FittedStep(step, params))
    return FittedRecipe(tuple(fitted), analysis.n_rows, tuple(warnings))


def apply_recipe(fitted: FittedRecipe, data: Dataset) -> tuple[Dataset, list[str]]:
    """Replay the steps with frozen parameters only."""
    warnings: list[str] = []
    current = data
    for fs in fitted.steps:
        step = fs.step
        if step.kind is StepKind.ROLE_UPDATE:
            current = current.with_role(fs.params[0], Role(fs.params[1]))
        elif step.kind in (StepKind.IMPUTE_MEDIAN, StepKind.IMPUTE_MEAN):
            current = _apply_impute(current, fs.params)
        elif step.kind is StepKind.NORMALIZE:
            current = _apply_normalize(current, fs.params)
        elif step.kind is StepKind.DUMMY_ENCODE:
            current = _apply_dummy(current, fs.params, warnings)
        elif step.kind is StepKind.ZERO_VARIANCE_FILTER:
            current = current.drop_columns(fs.params)
        elif step.kind is StepKind.CUSTOM_EXPR:
            expr = dsl.parse_expr(fs.params[0])
            current = _apply_custom(current, step, expr, FrozenAggregates(fs.params[1]), warnings)
    return current, warnings
