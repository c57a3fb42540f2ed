"""Batch front door: CSV ingestion, JSON experiment configs, audit-only and
split-inspection commands, the leakage simulation, and report/JSON emission.

Exit codes: 0 success, 2 config/data error, 3 audit rejection, 4 resampling
guard error.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time as _time

import numpy as np

from . import __version__
from .dsl import AuditFinding
from .engine import (
    DEFAULT_PRIMARY, EvaluationResult, ExperimentError, ExperimentSpec, run_experiment,
)
from .learners import FitError, ModelSpec
from .recipes import RecipeAuditError, RecipeSpec, Step, StepKind, audit_recipe, default_recipe, rejects
from .report import render_report
from .resampling import GuardError, ResampleSplit, ResamplingSpec, check_group_integrity, make_splits
from .simulation import SimConfig, distribution_summary, run_leakage_study
from .tabular import (
    Column, ColumnKind, Dataset, Role, SchemaError, TaskKind, categorical_column,
    categorical_from_strings, numeric_column, validate_schema,
)

WORKERS_ENV = "GUARDEDML_WORKERS"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_AUDIT = 3
EXIT_GUARD = 4


class ConfigError(ValueError):
    pass


class CsvError(ValueError):
    pass


# ----------------------------------------------------------------------------
# CSV ingestion

_MISSING_TOKENS = ("", "NA")
_NONNUMERIC = {"nan", "inf", "-inf", "+inf", "infinity", "-infinity", "+infinity"}


def _parses_numeric(s: str) -> bool:
    if s.strip().lower() in _NONNUMERIC:
        return False
    try:
        float(s)
        return True
    except ValueError:
        return False


def ingest_csv(path: str, force_categorical: frozenset[str] = frozenset()) -> Dataset:
    """RFC-4180 parsing; "" and "NA" are missing; a column where every
    non-missing cell parses as a decimal becomes numeric, otherwise it is
    categorical with first-appearance level order."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as e:
        raise CsvError(f"cannot read {path!r}: {e}") from e
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvError(f"{path}: empty file") from None
        dupes = {h for h in header if header.count(h) > 1}
        if dupes:
            raise CsvError(f"{path}: duplicate headers {sorted(dupes)}")
        rows = []
        for row in reader:
            if len(row) != len(header):
                raise CsvError(
                    f"{path}: line {reader.line_num}: expected {len(header)} fields, "
                    f"found {len(row)}")
            rows.append(row)
    if not rows:
        raise CsvError(f"{path}: no data rows")

    columns = []
    for j, name in enumerate(header):
        raw = [r[j] for r in rows]
        non_missing = [v for v in raw if v not in _MISSING_TOKENS]
        numeric = (name not in force_categorical and non_missing
                   and all(_parses_numeric(v) for v in non_missing))
        if numeric:
            values = np.array(
                [np.nan if v in _MISSING_TOKENS else float(v) for v in raw])
            columns.append(numeric_column(name, values))
        else:
            columns.append(categorical_from_strings(name, raw))
    return Dataset(tuple(columns))


def harmonize_levels(train: Dataset, test: Dataset) -> Dataset:
    """Remap test categorical codes onto the union of train and test levels,
    with train levels first, so dummy maps fitted on train treat test-only
    levels as unseen."""
    cols = []
    for c in test.columns:
        if not train.has_column(c.name):
            raise SchemaError(f"test data carries unknown column {c.name!r}")
        tc = train.column(c.name)
        if tc.kind is not c.kind:
            raise SchemaError(f"column {c.name!r} kind differs between train and test")
        if c.kind is ColumnKind.CATEGORICAL:
            union = list(tc.levels) + [lev for lev in c.levels if lev not in tc.levels]
            remap = np.array([union.index(lev) for lev in c.levels], dtype=np.int64)
            codes = np.where(c.values >= 0, remap[np.clip(c.values, 0, None)], -1)
            cols.append(categorical_column(c.name, codes, union, role=tc.role))
        else:
            cols.append(Column(c.name, c.kind, tc.role, c.values))
    return Dataset(tuple(cols))


# ----------------------------------------------------------------------------
# Config schema

_TASKS = ("classification", "regression", "survival")
_STEP_KINDS = tuple(k.value for k in StepKind)
_ROLES = tuple(r.value for r in Role)
_METHODS = ("cv", "repeatedcv", "boot", "grouped_cv", "blocked_cv", "rolling_origin",
            "nested_cv", "validation_split", "none", "custom")


def _check_keys(obj: dict, allowed: dict, path: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object")
    unknown = set(obj) - set(allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}")
    for key, (typ, required) in allowed.items():
        if key in obj:
            if typ is float:
                if not isinstance(obj[key], (int, float)) or isinstance(obj[key], bool):
                    raise ConfigError(f"{path}.{key}: expected a number")
            elif not isinstance(obj[key], typ) or (typ is int and isinstance(obj[key], bool)):
                raise ConfigError(f"{path}.{key}: expected {getattr(typ, '__name__', typ)}")
        elif required:
            raise ConfigError(f"{path}.{key}: required")


def validate_config(cfg: dict) -> dict:
    """Schema-check and normalize (defaults materialized).  Never touches data
    files.  Normalization is idempotent: re-validating the echo is a no-op."""
    _check_keys(cfg, {
        "schema_version": (int, True), "task": (str, True), "data": (dict, True),
        "models": (list, True), "recipe": (dict, False), "resampling": (dict, False),
        "metrics": (dict, False), "execution": (dict, False), "output": (dict, False),
    }, "config")
    if cfg["schema_version"] != 1:
        raise ConfigError(f"config.schema_version: unsupported version {cfg['schema_version']!r}")
    if cfg["task"] not in _TASKS:
        raise ConfigError(f"config.task: must be one of {_TASKS}")
    task = cfg["task"]

    data = dict(cfg["data"])
    _check_keys(data, {
        "train_csv": (str, True), "test_csv": (str, False), "label": (str, False),
        "time": (str, False), "status": (str, False), "event_class": (str, False),
        "test_size": (float, False), "id_cols": (list, False), "group_col": (str, False),
        "order_col": (str, False),
    }, "config.data")
    if task == "survival":
        if "time" not in data or "status" not in data:
            raise ConfigError("config.data: survival requires 'time' and 'status'")
        if "label" in data:
            raise ConfigError("config.data: survival uses time/status, not label")
    else:
        if "label" not in data:
            raise ConfigError(f"config.data: {task} requires 'label'")
        for k in ("time", "status"):
            if k in data:
                raise ConfigError(f"config.data.{k}: only valid for survival")
    data.setdefault("event_class", "first")
    if data["event_class"] not in ("first", "second"):
        raise ConfigError("config.data.event_class: must be 'first' or 'second'")
    data.setdefault("test_size", 0.2)
    if not 0.0 < data["test_size"] < 1.0:
        raise ConfigError("config.data.test_size: must lie in (0, 1)")
    data.setdefault("id_cols", [])
    if not all(isinstance(c, str) for c in data["id_cols"]):
        raise ConfigError("config.data.id_cols: expected a list of column names")

    recipe = dict(cfg.get("recipe", {}))
    _check_keys(recipe, {"steps": (list, False), "impute_method": (str, False)}, "config.recipe")
    recipe.setdefault("impute_method", "median")
    if recipe["impute_method"] not in ("median", "mean"):
        raise ConfigError("config.recipe.impute_method: must be 'median' or 'mean'")
    for i, step in enumerate(recipe.get("steps", [])):
        path = f"config.recipe.steps[{i}]"
        _check_keys(step, {
            "kind": (str, True), "columns": ((list, str), False), "column": (str, False),
            "role": (str, False), "target": (str, False), "expr": (str, False),
            "frozen": (dict, False),
        }, path)
        if step["kind"] not in _STEP_KINDS:
            raise ConfigError(f"{path}.kind: unknown step kind {step['kind']!r}")
        if step["kind"] == "role_update":
            if "column" not in step or "role" not in step:
                raise ConfigError(f"{path}: role_update requires 'column' and 'role'")
            if step["role"] not in _ROLES:
                raise ConfigError(f"{path}.role: unknown role {step['role']!r}")
        if step["kind"] == "custom_expr" and ("target" not in step or "expr" not in step):
            raise ConfigError(f"{path}: custom_expr requires 'target' and 'expr'")

    res = dict(cfg.get("resampling", {}))
    _check_keys(res, {
        "method": (str, False), "folds": (int, False), "repeats": (int, False),
        "times": (int, False), "stratify": (bool, False), "initial_window": (int, False),
        "assess_window": (int, False), "step": (int, False), "expanding": (bool, False),
        "validation_fraction": (float, False), "splits": (list, False),
    }, "config.resampling")
    res.setdefault("method", "none" if task == "survival" else "cv")
    if res["method"] not in _METHODS:
        raise ConfigError(f"config.resampling.method: must be one of {_METHODS}")
    res.setdefault("folds", 5)
    res.setdefault("repeats", 3 if res["method"] == "repeatedcv" else 1)
    res.setdefault("times", 25)
    res.setdefault("stratify", False)
    res.setdefault("step", 1)
    res.setdefault("expanding", False)
    res.setdefault("validation_fraction", 0.25)
    if res["method"] == "custom":
        for i, s in enumerate(res.get("splits", [])):
            _check_keys(s, {"label": (str, True), "analysis": (list, True),
                            "assessment": (list, True)}, f"config.resampling.splits[{i}]")
    elif "splits" in res:
        raise ConfigError("config.resampling.splits: only valid with method 'custom'")

    models = cfg["models"]
    if not models:
        raise ConfigError("config.models: at least one model is required")
    norm_models = []
    for i, m in enumerate(models):
        path = f"config.models[{i}]"
        _check_keys(m, {"algorithm": (str, True), "params": (dict, False),
                        "tune": (dict, False), "label": (str, False)}, path)
        mm = dict(m)
        mm.setdefault("params", {})
        norm_models.append(mm)

    met = dict(cfg.get("metrics", {}))
    _check_keys(met, {"primary": (str, False), "class_threshold": (float, False),
                      "bootstrap": (dict, False)}, "config.metrics")
    met.setdefault("primary", DEFAULT_PRIMARY[TaskKind(task)])
    met.setdefault("class_threshold", 0.5)
    boot = dict(met.get("bootstrap", {}))
    _check_keys(boot, {"enabled": (bool, False), "samples": (int, False),
                       "level": (float, False)}, "config.metrics.bootstrap")
    boot.setdefault("enabled", True)
    boot.setdefault("samples", 500)
    boot.setdefault("level", 0.95)
    met["bootstrap"] = boot

    execution = dict(cfg.get("execution", {}))
    _check_keys(execution, {"seed": (int, False), "workers": (int, False)}, "config.execution")
    execution.setdefault("seed", 2025)
    execution.setdefault("workers", 1)

    output = dict(cfg.get("output", {}))
    _check_keys(output, {"results_path": (str, False), "report_path": (str, False)},
                "config.output")
    output.setdefault("results_path", "results.json")
    output.setdefault("report_path", "report.txt")

    return {
        "schema_version": 1, "task": task, "data": data, "recipe": recipe,
        "resampling": res, "models": norm_models, "metrics": met,
        "execution": execution, "output": output,
    }


def _build_recipe(cfg: dict) -> RecipeSpec:
    rcfg = cfg["recipe"]
    if "steps" not in rcfg:
        return default_recipe(rcfg["impute_method"])
    steps = []
    for s in rcfg["steps"]:
        kind = StepKind(s["kind"])
        if kind is StepKind.ROLE_UPDATE:
            steps.append(Step(kind, (s["column"],), role=Role(s["role"])))
        elif kind is StepKind.CUSTOM_EXPR:
            steps.append(Step(kind, (), target=s["target"], expr_text=s["expr"],
                              frozen=s.get("frozen")))
        else:
            cols = s.get("columns", "all_numeric_predictors")
            steps.append(Step(kind, tuple(cols) if isinstance(cols, list) else cols))
    return RecipeSpec(tuple(steps))


def _build_resampling(cfg: dict) -> ResamplingSpec:
    r = cfg["resampling"]
    custom = tuple(
        ResampleSplit(np.asarray(s["analysis"], dtype=np.int64) - 1,
                      np.asarray(s["assessment"], dtype=np.int64) - 1,
                      s["label"])
        for s in r.get("splits", [])
    )
    return ResamplingSpec(
        method=r["method"], folds=r["folds"], repeats=r["repeats"], times=r["times"],
        stratify=r["stratify"], group_col=cfg["data"].get("group_col"),
        order_col=cfg["data"].get("order_col"), initial_window=r.get("initial_window"),
        assess_window=r.get("assess_window"), step=r["step"], expanding=r["expanding"],
        validation_fraction=r["validation_fraction"], custom_splits=custom,
    )


def _build_spec(cfg: dict, workers: int) -> ExperimentSpec:
    models = tuple(
        ModelSpec(m["algorithm"], dict(m["params"]), tune=m.get("tune"),
                  label=m.get("label"))
        for m in cfg["models"]
    )
    return ExperimentSpec(
        task=TaskKind(cfg["task"]),
        models=models,
        recipe=_build_recipe(cfg),
        resampling=_build_resampling(cfg),
        primary_metric=cfg["metrics"]["primary"],
        event_class=cfg["data"]["event_class"],
        class_threshold=cfg["metrics"]["class_threshold"],
        bootstrap_enabled=cfg["metrics"]["bootstrap"]["enabled"],
        bootstrap_samples=cfg["metrics"]["bootstrap"]["samples"],
        bootstrap_level=cfg["metrics"]["bootstrap"]["level"],
        test_size=cfg["data"]["test_size"],
        seed=cfg["execution"]["seed"],
        workers=workers,
    )


def _assign_roles(ds: Dataset, cfg: dict) -> Dataset:
    data = cfg["data"]
    task = cfg["task"]
    if task == "survival":
        ds = ds.with_role(data["time"], Role.TIME)
        ds = ds.with_role(data["status"], Role.STATUS)
    else:
        ds = ds.with_role(data["label"], Role.OUTCOME)
    for c in data["id_cols"]:
        ds = ds.with_role(c, Role.ID)
    if data.get("group_col"):
        ds = ds.with_role(data["group_col"], Role.GROUP)
    if data.get("order_col"):
        col = ds.column(data["order_col"])
        if col.kind is not ColumnKind.NUMERIC:
            raise ConfigError(f"order column {data['order_col']!r} must be numeric")
        ds = ds.with_role(data["order_col"], Role.ORDER)
    return ds


def _load_datasets(cfg: dict) -> tuple[Dataset, Dataset | None]:
    force = frozenset([cfg["data"]["label"]]) if cfg["task"] == "classification" else frozenset()
    train = _assign_roles(ingest_csv(cfg["data"]["train_csv"], force), cfg)
    test = None
    if cfg["data"].get("test_csv"):
        test = _assign_roles(ingest_csv(cfg["data"]["test_csv"], force), cfg)
        test = harmonize_levels(train, test)
    return train, test


# ----------------------------------------------------------------------------
# Results document


def _finding_dict(f: AuditFinding) -> dict:
    return {"severity": f.severity, "rule": f.rule, "message": f.message,
            "span": [f.span.start, f.span.end] if f.span else None}


def _metric_dict(mv) -> dict:
    return {"name": mv.name, "estimate": mv.estimate, "direction": mv.direction,
            "lower": mv.lower, "upper": mv.upper, "n_boot": mv.n_boot}


def results_document(result: EvaluationResult, config_echo: dict,
                     wall_clock: float) -> dict:
    echo = json.loads(json.dumps(config_echo))
    # worker count is an execution knob, not part of the experiment identity
    echo["execution"].pop("workers", None)
    return {
        "schema_version": 1,
        "software_version": __version__,
        "wall_clock_seconds": wall_clock,
        "config": echo,
        "task": result.task.value,
        "audit": {
            "clean": not any(f.severity == "reject" for f in result.audit_findings),
            "findings": [_finding_dict(f) for f in result.audit_findings],
        },
        "splits": {"labels": list(result.split_labels), "n_train": result.n_train,
                   "n_test": result.n_test},
        "cv": {
            "primary_metric": result.primary_metric,
            "table": [
                {"model": s.model_id, "mean": s.mean, "sd": s.sd, "n_folds": s.n_folds,
                 "n_defined": s.n_defined, "params": s.params}
                for s in result.cv_table
            ],
            "candidates": [
                {"model": s.model_id, "grid_index": s.grid_index, "mean": s.mean,
                 "sd": s.sd, "params": s.params}
                for s in result.all_candidates
            ],
            "fold_records": [
                {"split": r.split_label, "model": r.model_id, "grid_index": r.grid_index,
                 "metrics": r.metrics, "recipe_fingerprint": r.recipe_fingerprint,
                 "n_assessment": r.n_assessment, "tag": r.tag}
                for r in result.fold_records
            ],
        },
        "selected_model": result.selected_model,
        "best_params": result.best_params,
        "holdout": [
            {"model": e.model_id, "params": e.params, "flags": list(e.flags),
             "metrics": [_metric_dict(mv) for mv in e.metrics]}
            for e in result.holdout
        ],
        "refit_recipe_fingerprint": result.refit_fingerprint,
        "survival_grid": list(result.survival_grid),
        "survival_tau": result.survival_tau,
        "warnings": list(result.warnings),
    }


def _dump_json(doc: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


# ----------------------------------------------------------------------------
# Commands


def _load_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path!r}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path!r} is not valid JSON: {e}") from e
    return validate_config(raw)


def cmd_run(config_path: str, out=sys.stdout) -> int:
    started = _time.time()
    cfg = _load_config(config_path)
    workers = int(os.environ.get(WORKERS_ENV, cfg["execution"]["workers"]))
    spec = _build_spec(cfg, workers)
    train, test = _load_datasets(cfg)
    result = run_experiment(spec, train, test)
    report = render_report(result)
    doc = results_document(result, cfg, wall_clock=_time.time() - started)
    _dump_json(doc, cfg["output"]["results_path"])
    with open(cfg["output"]["report_path"], "w", encoding="utf-8") as f:
        f.write(report)
    out.write(report)
    return EXIT_OK


def cmd_audit(config_path: str, out=sys.stdout) -> int:
    """Static audit only; never reads the data file."""
    cfg = _load_config(config_path)
    recipe = _build_recipe(cfg)
    findings = audit_recipe(recipe, schema=None)
    out.write(json.dumps({"findings": [_finding_dict(f) for f in findings]},
                         indent=2, sort_keys=True) + "\n")
    return EXIT_AUDIT if rejects(findings) else EXIT_OK


def cmd_splits(config_path: str, out=sys.stdout, out_path: str | None = None) -> int:
    """Emit the resampling plan over the training CSV as 1-based index sets."""
    cfg = _load_config(config_path)
    train, _ = _load_datasets(cfg)
    train = validate_schema(train, TaskKind(cfg["task"]))
    spec = _build_spec(cfg, workers=1)
    from .engine import strata_values, _role_values

    splits = make_splits(
        spec.resampling, train.n_rows,
        strata=strata_values(spec, train),
        groups=_role_values(train, Role.GROUP),
        order=_role_values(train, Role.ORDER),
        seed=spec.seed,
    )
    doc = {"n_rows": train.n_rows, "labels": [s.label for s in splits], "splits": [
        {"label": s.label,
         "analysis": (s.analysis + 1).tolist(),
         "assessment": (s.assessment + 1).tolist()}
        for s in splits
    ]}
    groups = _role_values(train, Role.GROUP)
    if groups is not None:
        doc["group_violations"] = [
            {"split": label, "group": str(g)} for label, g in check_group_integrity(splits, groups)
        ]
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out_path:
        with open(out_path, "w", encoding="utf-8") as f:
            f.write(text)
    out.write(text)
    return EXIT_OK


def cmd_simulate_leakage(n_sims: int, seed: int, sites: int, per_site: int,
                         trees: int = 50, out_json: str | None = None,
                         runs_csv: str | None = None, distributions: bool = False,
                         out=sys.stdout) -> int:
    if min(n_sims, sites, per_site, trees) < 1:
        raise ConfigError("all simulation counts must be positive")
    if sites < 2:
        raise ConfigError("grouped CV needs at least 2 sites")
    if n_sims < 2:
        raise ConfigError("n_sims must be >= 2")
    config = SimConfig(n_sims=n_sims, n_sites=sites, n_per_site=per_site,
                       trees=trees, seed=seed)
    result = run_leakage_study(config)
    out.write(
        f"leaky={result.leaky_mean:.3f} (SD {result.leaky_sd:.3f}), "
        f"guarded={result.guarded_mean:.3f} (SD {result.guarded_sd:.3f}), "
        f"inflation={result.inflation_mean:.3f} "
        f"CI=[{result.inflation_ci[0]:.3f}, {result.inflation_ci[1]:.3f}]\n")
    doc = result.as_dict()
    doc["config"] = {"n_sims": n_sims, "n_sites": sites, "n_per_site": per_site,
                     "trees": trees, "seed": seed}
    if distributions:
        doc["distributions"] = {
            "leaky": distribution_summary(result.leaky),
            "guarded": distribution_summary(result.guarded),
            "paired_difference": distribution_summary(result.leaky - result.guarded),
        }
    if out_json:
        _dump_json(doc, out_json)
    if runs_csv:
        with open(runs_csv, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["run", "leaky_auc", "guarded_auc"])
            for i, (lk, gd) in enumerate(zip(result.leaky, result.guarded), start=1):
                writer.writerow([i, repr(float(lk)), repr(float(gd))])
    return EXIT_OK


# ----------------------------------------------------------------------------
# Entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="guardedml",
        description="Leakage-aware model evaluation with fold-local preprocessing.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the full experiment from a JSON config")
    run.add_argument("config")

    audit = sub.add_parser("audit", help="static recipe audit; never reads data")
    audit.add_argument("config")

    spl = sub.add_parser("splits", help="emit the resampling plan as JSON")
    spl.add_argument("config")
    spl.add_argument("--out", default=None)

    sim = sub.add_parser("simulate-leakage",
                         help="Monte Carlo contrast of global vs fold-local preprocessing")
    sim.add_argument("--n-sims", type=int, default=100)
    sim.add_argument("--seed", type=int, default=2025)
    sim.add_argument("--sites", type=int, default=10)
    sim.add_argument("--per-site", type=int, default=100)
    sim.add_argument("--trees", type=int, default=50)
    sim.add_argument("--out", default=None, help="summary JSON path")
    sim.add_argument("--runs-csv", default=None, help="per-run AUC pairs CSV path")
    sim.add_argument("--distributions", action="store_true",
                     help="include five-number distribution summaries in the JSON")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config)
        if args.command == "audit":
            return cmd_audit(args.config)
        if args.command == "splits":
            return cmd_splits(args.config, out_path=args.out)
        return cmd_simulate_leakage(
            args.n_sims, args.seed, args.sites, args.per_site, trees=args.trees,
            out_json=args.out, runs_csv=args.runs_csv, distributions=args.distributions)
    except RecipeAuditError as e:
        print(f"audit rejection: {e}", file=sys.stderr)
        return EXIT_AUDIT
    except GuardError as e:
        print(f"resampling guard error: {e}", file=sys.stderr)
        return EXIT_GUARD
    except (ConfigError, CsvError, SchemaError, ExperimentError, FitError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
