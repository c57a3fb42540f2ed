"""Fixed-width two-table text report.

Table 1 ranks models by cross-validated primary metric (mean and SD) and
marks the selected one; Table 2 reports the full metric panel on the held-out
test set, for reporting only.
"""
from __future__ import annotations

from .engine import EvaluationResult
from .metrics import DIRECTIONS
from .tabular import TaskKind

DISPLAY_NAMES = {
    "accuracy": "Accuracy", "kappa": "Kappa", "sens": "Sensitivity",
    "spec": "Specificity", "precision": "Precision", "f_meas": "F1 Score",
    "roc_auc": "ROC AUC", "logloss": "Logloss", "brier": "Brier Score", "ece": "ECE",
    "rmse": "RMSE", "rsq": "R-squared", "mae": "MAE",
    "c_index": "Harrell C-index", "uno_c": "Uno's C-index",
    "ibs": "Integrated Brier Score",
}


def display_name(metric: str) -> str:
    if metric.startswith("brier(t="):
        return "Brier(t=" + metric[len("brier(t="):]
    if metric.startswith("rmst_diff(t<="):
        return "RMST diff (t<=" + metric[len("rmst_diff(t<="):]
    return DISPLAY_NAMES.get(metric, metric)


def _table(headers: list[str], rows: list[list[str]]) -> list[str]:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    line = "-" * (sum(widths) + 2 * (len(widths) - 1) + 1)
    out = [line, "  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip()]
    out.append(line)
    for r in rows:
        out.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    out.append(line)
    return out


def _fmt(value, digits: int) -> str:
    if value is None:
        return "NA"
    return f"{value:.{digits}f}"


def render_report(result: EvaluationResult) -> str:
    lines = []
    lines.append("===== Model Summary =====")
    lines.append(f"Task: {result.task.value}")
    lines.append(f"Number of Models Trained: {len(result.holdout)}")
    lines.append("")

    pm = display_name(result.primary_metric)
    if result.cv_table:
        lines.append("-- Table 1: Model Selection (Cross-Validation) --")
        lines.append("Note: This table determines the best model.")
        lines.append("")
        direction = DIRECTIONS[result.primary_metric]
        ranked = sorted(
            result.cv_table,
            key=lambda s: (s.mean is None,
                           -(s.mean or 0.0) if direction == "maximize" else (s.mean or 0.0)))
        rows = []
        for s in ranked:
            marker = "†" if s.model_id == result.selected_model else ""
            rows.append([s.model_id + marker, _fmt(s.mean, 4), _fmt(s.sd, 4)])
        lines.extend(_table(["Model", f"{pm} (CV mean)", f"{pm} (CV SD)"], rows))
        lines.append(f"† Selected based on mean {pm} across CV folds")
        lines.append("")
    else:
        lines.append("-- Table 1: Model Selection (Cross-Validation) --")
        lines.append("Note: skipped (no resampling requested; holdout evaluation only).")
        lines.append("")

    lines.append("-- Table 2: Final Evaluation (Test Set) --")
    lines.append("Note: For reporting only; selection was based on CV above.")
    lines.append("")
    metric_names = []
    for e in result.holdout:
        for mv in e.metrics:
            if mv.name not in metric_names:
                metric_names.append(mv.name)
    headers = ["Model"] + [display_name(n) for n in metric_names]
    rows = []
    for e in result.holdout:
        by_name = {mv.name: mv for mv in e.metrics}
        rows.append([e.model_id] + [
            _fmt(by_name[n].estimate, 3) if n in by_name else "NA" for n in metric_names])
    lines.extend(_table(headers, rows))

    if result.selected_model is not None:
        params = result.best_params.get(result.selected_model, {})
        if params:
            lines.append("")
            lines.append("Best Model hyperparameters:")
            lines.append("")
            lines.append(f"Model: {result.selected_model}")
            for k, v in params.items():
                lines.append(f"  {k}: {v}")
    if result.warnings:
        lines.append("")
        lines.append("Warnings:")
        for w in result.warnings:
            lines.append(f"  - {w}")
    return "\n".join(lines) + "\n"
