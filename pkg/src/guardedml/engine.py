"""Guarded orchestration: iterate splits, fit the recipe on analysis rows,
apply it frozen to assessment rows, fit and evaluate models, tune on a grid
inside resampling, select on CV summaries only, and report holdout metrics.

Concurrency contract: (fold x model x grid-point) units are pure given their
substream seed and are merged in deterministic unit order, so output is
identical for any worker count.
"""
from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics as metrics_mod
from ._rng import mix64
from .learners import (
    FitError, FittedModel, ModelSpec, PredictionKind, fit_model, predict,
    supported_kinds, validate_model_spec,
)
from .metrics import (
    ClassificationFrame, DIRECTIONS, MetricValue, RegressionFrame, SurvivalFrame,
    classification_metrics, harrell_c, integrated_brier, regression_metrics,
    rmst_diff, uno_c, with_bootstrap_ci,
)
from .recipes import FittedRecipe, RecipeAuditError, RecipeSpec, apply_recipe, audit_recipe, fit_recipe, rejects
from .resampling import GuardError, ResampleSplit, ResamplingSpec, check_full_analysis, make_splits
from .tabular import ColumnKind, Dataset, Role, SchemaError, TaskKind, subset_rows, validate_schema

PRIMARY_METRICS = {
    TaskKind.CLASSIFICATION: ("roc_auc", "accuracy", "kappa", "sens", "spec",
                              "precision", "f_meas", "logloss", "brier", "ece"),
    TaskKind.REGRESSION: ("rmse", "rsq", "mae"),
    TaskKind.SURVIVAL: ("c_index", "uno_c"),
}

DEFAULT_PRIMARY = {
    TaskKind.CLASSIFICATION: "roc_auc",
    TaskKind.REGRESSION: "rmse",
    TaskKind.SURVIVAL: "c_index",
}


class ExperimentError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    task: TaskKind
    models: tuple[ModelSpec, ...]
    recipe: RecipeSpec
    resampling: ResamplingSpec
    primary_metric: str
    event_class: str = "first"
    class_threshold: float = 0.5
    bootstrap_enabled: bool = True
    bootstrap_samples: int = 500
    bootstrap_level: float = 0.95
    test_size: float = 0.2
    seed: int = 2025
    workers: int = 1


def validate_experiment_spec(spec: ExperimentSpec) -> None:
    if not spec.models:
        raise ExperimentError("at least one model is required")
    if spec.primary_metric not in PRIMARY_METRICS[spec.task]:
        raise ExperimentError(
            f"primary metric {spec.primary_metric!r} is not valid for {spec.task.value}")
    if spec.event_class not in ("first", "second"):
        raise ExperimentError("event_class must be 'first' or 'second'")
    if not 0.0 < spec.test_size < 1.0:
        raise ExperimentError("test_size must lie in (0, 1)")
    seen = set()
    for m in spec.models:
        validate_model_spec(m, spec.task.value)
        if m.model_id in seen:
            raise ExperimentError(f"duplicate model id {m.model_id!r}")
        seen.add(m.model_id)


# ----------------------------------------------------------------------------
# Data plumbing


def feature_matrix(ds: Dataset) -> tuple[np.ndarray, tuple[str, ...]]:
    cols = [c for c in ds.columns if c.role is Role.PREDICTOR]
    cat = [c.name for c in cols if c.kind is ColumnKind.CATEGORICAL]
    if cat:
        raise FitError(f"categorical predictors remain after preprocessing: {cat}; "
                       "add a dummy_encode step")
    numeric = [c for c in cols if c.kind is ColumnKind.NUMERIC]
    if not numeric:
        raise FitError("no predictor columns remain after preprocessing")
    X = np.column_stack([c.values for c in numeric])
    return X, tuple(c.name for c in numeric)


def strata_values(spec: ExperimentSpec, ds: Dataset):
    if spec.task is TaskKind.CLASSIFICATION:
        return ds.columns_with_role(Role.OUTCOME)[0].values
    if spec.task is TaskKind.SURVIVAL:
        return ds.columns_with_role(Role.STATUS)[0].values
    return None


def _outcome(spec: ExperimentSpec, ds: Dataset) -> dict:
    if spec.task is TaskKind.CLASSIFICATION:
        col = ds.columns_with_role(Role.OUTCOME)[0]
        pos = 0 if spec.event_class == "first" else 1
        return {"y_codes": col.values, "n_levels": len(col.levels),
                "levels": col.levels, "positive_index": pos}
    if spec.task is TaskKind.REGRESSION:
        return {"y_numeric": ds.columns_with_role(Role.OUTCOME)[0].values}
    return {"time": ds.columns_with_role(Role.TIME)[0].values,
            "status": ds.columns_with_role(Role.STATUS)[0].values}


def train_test_split(dataset: Dataset, fraction: float = 0.2, strata=None,
                     seed: int = 0) -> tuple[Dataset, Dataset]:
    """Disjoint, covering split; stratified when strata values are given."""
    from .resampling import make_validation_split

    if not 0.0 < fraction < 1.0:
        raise ExperimentError("holdout fraction must lie in (0, 1)")
    split = make_validation_split(dataset.n_rows, fraction, strata=strata,
                                  seed=mix64(seed, 101))[0]
    return subset_rows(dataset, split.analysis), subset_rows(dataset, split.assessment)


# ----------------------------------------------------------------------------
# Fold records


@dataclass(frozen=True)
class FoldRecord:
    split_label: str
    model_id: str
    grid_index: int
    params: dict
    metrics: dict
    recipe_fingerprint: str
    n_assessment: int
    tag: str = "guarded"
    warnings: tuple[str, ...] = ()
    predictions: object = None


def _prediction_frame(spec: ExperimentSpec, model: FittedModel, X, names, outcome) -> object:
    if spec.task is TaskKind.CLASSIFICATION:
        probs = predict(model, X, names, PredictionKind.CLASS_PROB)
        return ClassificationFrame(outcome["y_codes"], probs, outcome["levels"],
                                   outcome["positive_index"])
    if spec.task is TaskKind.REGRESSION:
        return RegressionFrame(outcome["y_numeric"],
                               predict(model, X, names, PredictionKind.NUMERIC))
    risk = predict(model, X, names, PredictionKind.RISK_SCORE)
    curves = None
    if PredictionKind.SURVIVAL_CURVE in supported_kinds(model):
        curves = predict(model, X, names, PredictionKind.SURVIVAL_CURVE)
    return SurvivalFrame(outcome["time"], outcome["status"], risk, curves)


def _panel_value(spec: ExperimentSpec, frame, name: str) -> float | None:
    if spec.task is TaskKind.CLASSIFICATION:
        panel = classification_metrics(frame, threshold=spec.class_threshold)
        return next(m.estimate for m in panel if m.name == name)
    if spec.task is TaskKind.REGRESSION:
        panel = regression_metrics(frame)
        return next(m.estimate for m in panel if m.name == name)
    if name == "c_index":
        return harrell_c(frame.risk, frame.time, frame.status).estimate
    return uno_c(frame.risk, frame.time, frame.status).estimate


def _raw_predictions(spec: ExperimentSpec, frame) -> np.ndarray:
    if spec.task is TaskKind.CLASSIFICATION:
        return frame.probs
    if spec.task is TaskKind.REGRESSION:
        return frame.pred
    return frame.risk


def _run_unit(spec: ExperimentSpec, train: Dataset, split: ResampleSplit,
              split_idx: int, model_pos: int, mspec: ModelSpec, grid_idx: int,
              params: dict, fixed_recipe: FittedRecipe | None, tag: str,
              keep_predictions: bool) -> FoldRecord:
    analysis = subset_rows(train, split.analysis)
    assessment = subset_rows(train, split.assessment)
    fitted = fixed_recipe if fixed_recipe is not None else fit_recipe(spec.recipe, analysis)
    a_t, warn_a = apply_recipe(fitted, analysis)
    b_t, warn_b = apply_recipe(fitted, assessment)
    X_a, names = feature_matrix(a_t)
    X_b, names_b = feature_matrix(b_t)
    model = fit_model(
        mspec.algorithm, params, X_a, names, task=spec.task.value,
        seed=mix64(spec.seed, split_idx, model_pos, grid_idx),
        **{k: v for k, v in _outcome(spec, a_t).items()
           if k in ("y_codes", "n_levels", "y_numeric", "time", "status")})
    outcome_b = _outcome(spec, b_t)
    frame = _prediction_frame(spec, model, X_b, names_b, outcome_b)
    value = _panel_value(spec, frame, spec.primary_metric)
    return FoldRecord(
        split_label=split.label,
        model_id=mspec.model_id,
        grid_index=grid_idx,
        params=dict(params),
        metrics={spec.primary_metric: value},
        recipe_fingerprint=fitted.fingerprint(),
        n_assessment=assessment.n_rows,
        tag=tag,
        warnings=tuple(fitted.warnings) + tuple(warn_a) + tuple(warn_b) + model.flags,
        predictions=_raw_predictions(spec, frame) if keep_predictions else None,
    )


def _run_units(spec: ExperimentSpec, units, workers: int):
    if workers <= 1 or len(units) <= 1:
        return [u() for u in units]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda u: u(), units))


def _model_grid(mspec: ModelSpec) -> list[dict]:
    """Cartesian product of tune lists in declaration order; fixed params merged in."""
    if not mspec.tune:
        return [dict(mspec.params)]
    keys = list(mspec.tune.keys())
    value_lists = []
    for k in keys:
        v = mspec.tune[k]
        value_lists.append(list(v) if isinstance(v, (list, tuple)) else [v])
    grid = []
    for combo in itertools.product(*value_lists):
        params = dict(mspec.params)
        params.update(dict(zip(keys, combo)))
        grid.append(params)
    if not grid:
        raise ExperimentError(f"{mspec.model_id}: empty tuning grid")
    return grid


def guarded_resample_fit(spec: ExperimentSpec, train: Dataset,
                         splits: list[ResampleSplit],
                         model_entries: list[tuple[int, ModelSpec, int, dict]] | None = None,
                         keep_predictions: bool = False) -> list[FoldRecord]:
    """The guarded core loop: recipe fitted on analysis rows of each split only.

    Aborts if any split fails the full-analysis guard or the recipe carries
    reject findings.
    """
    bad = rejects(audit_recipe(spec.recipe, train))
    if bad:
        raise RecipeAuditError(bad)
    for s in splits:
        check_full_analysis(s, train.n_rows)
    if model_entries is None:
        model_entries = [(pos, m, 0, dict(m.params)) for pos, m in enumerate(spec.models)]
    units = [
        (lambda si=si, s=s, mp=mp, ms=ms, gi=gi, pr=pr: _run_unit(
            spec, train, s, si, mp, ms, gi, pr, None, "guarded", keep_predictions))
        for mp, ms, gi, pr in model_entries
        for si, s in enumerate(splits)
    ]
    return _run_units(spec, units, spec.workers)


def leaky_resample_fit(spec: ExperimentSpec, train: Dataset,
                       splits: list[ResampleSplit],
                       model_entries: list[tuple[int, ModelSpec, int, dict]] | None = None,
                       keep_predictions: bool = False,
                       unsafe: bool = False) -> list[FoldRecord]:
    """Simulation-only contrast arm: the recipe is fitted once on ALL rows and
    reused across folds.  Refused without the explicit unsafe flag."""
    if not unsafe:
        raise ExperimentError(
            "leaky_resample_fit deliberately leaks preprocessing across folds; "
            "pass unsafe=True only in simulation code")
    bad = rejects(audit_recipe(spec.recipe, train))
    if bad:
        raise RecipeAuditError(bad)
    for s in splits:
        check_full_analysis(s, train.n_rows)
    leaked = fit_recipe(spec.recipe, train)
    if model_entries is None:
        model_entries = [(pos, m, 0, dict(m.params)) for pos, m in enumerate(spec.models)]
    units = [
        (lambda si=si, s=s, mp=mp, ms=ms, gi=gi, pr=pr: _run_unit(
            spec, train, s, si, mp, ms, gi, pr, leaked, "LEAKY", keep_predictions))
        for mp, ms, gi, pr in model_entries
        for si, s in enumerate(splits)
    ]
    return _run_units(spec, units, spec.workers)


# ----------------------------------------------------------------------------
# Summaries, tuning, selection


@dataclass(frozen=True)
class CvSummary:
    model_id: str
    grid_index: int
    params: dict
    mean: float | None
    sd: float | None
    n_folds: int
    n_defined: int


def summarize_records(records: list[FoldRecord], metric: str) -> list[CvSummary]:
    """Plain arithmetic mean/sd over folds with defined metric values."""
    keys = []
    for r in records:
        key = (r.model_id, r.grid_index)
        if key not in keys:
            keys.append(key)
    out = []
    for model_id, gi in keys:
        rs = [r for r in records if r.model_id == model_id and r.grid_index == gi]
        vals = [r.metrics[metric] for r in rs if r.metrics[metric] is not None]
        mean = float(np.mean(vals)) if vals else None
        sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else (0.0 if vals else None)
        out.append(CvSummary(model_id, gi, rs[0].params, mean, sd, len(rs), len(vals)))
    return out


def _better(a: CvSummary, b: CvSummary, direction: str) -> bool:
    """True when a beats b: better mean, then lower sd, then earlier order."""
    if b.mean is None:
        return a.mean is not None
    if a.mean is None:
        return False
    if a.mean != b.mean:
        return a.mean > b.mean if direction == "maximize" else a.mean < b.mean
    if (a.sd or 0.0) != (b.sd or 0.0):
        return (a.sd or 0.0) < (b.sd or 0.0)
    return False  # earlier candidate wins ties; callers scan in order


def select_best(summaries: list[CvSummary], direction: str) -> CvSummary | None:
    best = None
    for s in summaries:
        if best is None or _better(s, best, direction):
            best = s
    if best is not None and best.mean is None:
        return None
    return best


def tune_grid(spec: ExperimentSpec, train: Dataset, splits: list[ResampleSplit]
              ) -> tuple[list[FoldRecord], list[CvSummary], dict[str, dict]]:
    """Evaluate every grid point of every model on the same splits.

    Returns all fold records, per-candidate summaries, and the winning
    parameters per model (best mean, ties to lower sd, then grid order).
    """
    entries = []
    for pos, m in enumerate(spec.models):
        for gi, params in enumerate(_model_grid(m)):
            entries.append((pos, m, gi, params))
    records = guarded_resample_fit(spec, train, splits, model_entries=entries)
    summaries = summarize_records(records, spec.primary_metric)
    direction = DIRECTIONS[spec.primary_metric]
    best_params: dict[str, dict] = {}
    for m in spec.models:
        cand = [s for s in summaries if s.model_id == m.model_id]
        win = select_best(cand, direction)
        best_params[m.model_id] = dict(win.params) if win is not None else dict(m.params)
    return records, summaries, best_params


# ----------------------------------------------------------------------------
# Finalize: refit on the full training split, evaluate on the untouched test set


@dataclass(frozen=True)
class HoldoutEntry:
    model_id: str
    params: dict
    metrics: tuple[MetricValue, ...]
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class EvaluationResult:
    task: TaskKind
    primary_metric: str
    selected_model: str | None
    cv_table: tuple[CvSummary, ...]
    all_candidates: tuple[CvSummary, ...]
    fold_records: tuple[FoldRecord, ...]
    holdout: tuple[HoldoutEntry, ...]
    best_params: dict
    audit_findings: tuple
    warnings: tuple[str, ...]
    split_labels: tuple[str, ...]
    n_train: int
    n_test: int
    refit_fingerprint: str
    survival_grid: tuple[float, ...] = ()
    survival_tau: float | None = None


def survival_eval_grid(time, status) -> tuple[tuple[float, ...], float]:
    """Brier grid at the 25/50/75 percentiles of training event times; RMST
    horizon at the 90th percentile of follow-up."""
    time = np.asarray(time, dtype=np.float64)
    status = np.asarray(status, dtype=np.float64)
    ev = time[status > 0]
    grid = tuple(np.unique(np.quantile(ev, [0.25, 0.5, 0.75]))) if ev.size else ()
    tau = float(np.quantile(time, 0.9))
    return grid, tau


def _survival_panel(frame: SurvivalFrame, grid, tau, boot) -> list[MetricValue]:
    out = [harrell_c(frame.risk, frame.time, frame.status)]
    out.append(uno_c(frame.risk, frame.time, frame.status))
    if boot:
        B, level, seed = boot
        out[0] = with_bootstrap_ci(
            out[0], frame, lambda f: harrell_c(f.risk, f.time, f.status).estimate,
            B=B, level=level, seed=mix64(seed, 0))
        out[1] = with_bootstrap_ci(
            out[1], frame, lambda f: uno_c(f.risk, f.time, f.status).estimate,
            B=B, level=level, seed=mix64(seed, 1))
    if frame.curves is None:
        return out

    if len(grid) >= 2:
        ibs = integrated_brier(frame.curves, frame.time, frame.status, np.asarray(grid))
        if boot:
            B, level, seed = boot
            ibs = with_bootstrap_ci(
                ibs, frame,
                lambda f: integrated_brier(f.curves, f.time, f.status, np.asarray(grid)).estimate,
                B=B, level=level, seed=mix64(seed, 2))
        out.append(ibs)
    diff = rmst_diff(frame.curves, frame.time, frame.status, tau)
    diff = replace(diff, name=f"rmst_diff(t<={tau:g})")
    if boot:
        B, level, seed = boot
        diff = with_bootstrap_ci(
            diff, frame, lambda f: rmst_diff(f.curves, f.time, f.status, tau).estimate,
            B=B, level=level, seed=mix64(seed, 3))
    out.append(diff)
    for k, t_star in enumerate(grid):
        bv = metrics_mod.brier_survival(frame.curves, frame.time, frame.status, float(t_star))
        if boot:
            B, level, seed = boot
            bv = with_bootstrap_ci(
                bv, frame,
                lambda f, ts=float(t_star): metrics_mod.brier_survival(
                    f.curves, f.time, f.status, ts).estimate,
                B=B, level=level, seed=mix64(seed, 4 + k))
        out.append(bv)
    return out


def holdout_evaluate(spec: ExperimentSpec, train: Dataset, test: Dataset,
                     best_params: dict) -> tuple[list[HoldoutEntry], str, tuple, float | None]:
    """Refit every model (winning parameters) on the full training split; the
    recipe is refit on that split too.  Test rows never influence anything."""
    if test.n_rows == 0:
        raise ExperimentError("test split is empty")
    fitted = fit_recipe(spec.recipe, train)
    train_t, _ = apply_recipe(fitted, train)
    test_t, _ = apply_recipe(fitted, test)
    X_tr, names = feature_matrix(train_t)
    X_te, names_te = feature_matrix(test_t)
    outcome_tr = _outcome(spec, train_t)
    outcome_te = _outcome(spec, test_t)

    grid, tau = ((), None)
    if spec.task is TaskKind.SURVIVAL:
        grid, tau = survival_eval_grid(outcome_tr["time"], outcome_tr["status"])

    entries = []
    for pos, m in enumerate(spec.models):
        params = best_params.get(m.model_id, dict(m.params))
        model = fit_model(
            m.algorithm, params, X_tr, names, task=spec.task.value,
            seed=mix64(spec.seed, 999_000, pos, 0),
            **{k: v for k, v in outcome_tr.items()
               if k in ("y_codes", "n_levels", "y_numeric", "time", "status")})
        frame = _prediction_frame(spec, model, X_te, names_te, outcome_te)
        boot = ((spec.bootstrap_samples, spec.bootstrap_level, mix64(spec.seed, 777_000, pos))
                if spec.bootstrap_enabled else None)
        if spec.task is TaskKind.CLASSIFICATION:
            panel = classification_metrics(frame, threshold=spec.class_threshold)
            if boot:
                B, level, bseed = boot
                panel = [
                    with_bootstrap_ci(
                        mv, frame,
                        lambda f, nm=mv.name: next(
                            x.estimate for x in classification_metrics(
                                f, threshold=spec.class_threshold) if x.name == nm),
                        B=B, level=level, seed=mix64(bseed, j))
                    for j, mv in enumerate(panel)
                ]
        elif spec.task is TaskKind.REGRESSION:
            panel = regression_metrics(frame)
            if boot:
                B, level, bseed = boot
                panel = [
                    with_bootstrap_ci(
                        mv, frame,
                        lambda f, nm=mv.name: next(
                            x.estimate for x in regression_metrics(f) if x.name == nm),
                        B=B, level=level, seed=mix64(bseed, j))
                    for j, mv in enumerate(panel)
                ]
        else:
            panel = _survival_panel(frame, grid, tau, boot)
        entries.append(HoldoutEntry(m.model_id, params, tuple(panel), model.flags))
    return entries, fitted.fingerprint(), grid, tau


def run_experiment(spec: ExperimentSpec, data: Dataset,
                   test: Dataset | None = None) -> EvaluationResult:
    """Full pipeline: split, audit, (tune inside) guarded CV, select, finalize."""
    validate_experiment_spec(spec)
    data = validate_schema(data, spec.task)
    if test is not None:
        test = validate_schema(test, spec.task)
        train = data
    else:
        train, test = train_test_split(data, spec.test_size,
                                       strata=strata_values(spec, data), seed=spec.seed)

    findings = audit_recipe(spec.recipe, train)
    if rejects(findings):
        raise RecipeAuditError(rejects(findings))

    splits = make_splits(
        spec.resampling, train.n_rows,
        strata=strata_values(spec, train),
        groups=_role_values(train, Role.GROUP),
        order=_role_values(train, Role.ORDER),
        seed=mix64(spec.seed, 202),
    )

    if splits:
        records, all_candidates, best_params = tune_grid(spec, train, splits)
        direction = DIRECTIONS[spec.primary_metric]
        winners = []
        for m in spec.models:
            cand = [s for s in all_candidates if s.model_id == m.model_id]
            win = select_best(cand, direction)
            if win is not None:
                winners.append(win)
        selected = select_best(winners, direction)
        selected_id = selected.model_id if selected is not None else None
    else:
        for m in spec.models:
            if m.tune and any(
                    isinstance(v, (list, tuple)) and len(v) > 1 for v in m.tune.values()):
                raise ExperimentError(
                    f"{m.model_id}: tuning grids require a resampling method")
        records, all_candidates, winners = [], [], []
        best_params = {m.model_id: {**m.params, **{k: (v[0] if isinstance(v, (list, tuple)) else v)
                                                   for k, v in (m.tune or {}).items()}}
                       for m in spec.models}
        selected_id = None

    holdout, refit_fp, grid, tau = holdout_evaluate(spec, train, test, best_params)
    warnings = tuple(sorted({w for r in records for w in r.warnings}))
    return EvaluationResult(
        task=spec.task,
        primary_metric=spec.primary_metric,
        selected_model=selected_id,
        cv_table=tuple(winners),
        all_candidates=tuple(all_candidates),
        fold_records=tuple(records),
        holdout=tuple(holdout),
        best_params=best_params,
        audit_findings=tuple(findings),
        warnings=warnings,
        split_labels=tuple(s.label for s in splits),
        n_train=train.n_rows,
        n_test=test.n_rows,
        refit_fingerprint=refit_fp,
        survival_grid=tuple(grid),
        survival_tau=tau,
    )


def _role_values(ds: Dataset, role: Role):
    cols = ds.columns_with_role(role)
    return cols[0].values if cols else None
