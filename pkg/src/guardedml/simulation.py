"""Monte Carlo harness quantifying preprocessing leakage under grouped CV.

Each run simulates multi-site data with a strong site offset in the observed
predictor while the outcome depends only on the latent signal.  The leaky arm
standardizes the predictor within each site using ALL rows before
leave-one-site-out CV; the guarded arm re-estimates normalization inside each
fold.  Both arms share the same generated data, grouped splits, and per-fold
forest seeds, so the paired difference isolates the leak.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats as _sstats

from ._rng import mix64, substream
from .engine import ExperimentSpec, guarded_resample_fit
from .learners import ModelSpec, PredictionKind, fit_model, predict
from .metrics import roc_auc
from .recipes import RecipeSpec, Step, StepKind
from .resampling import ResamplingSpec, make_group_vfold
from .tabular import (
    Dataset, Role, TaskKind, categorical_column, numeric_column, subset_rows,
)


@dataclass(frozen=True)
class SimConfig:
    n_sims: int = 100
    n_sites: int = 10
    n_per_site: int = 100
    offset_mean: float = 5.0
    offset_sd: float = 5.0
    signal_coef: float = 2.0
    trees: int = 50
    seed: int = 2025

    def __post_init__(self):
        if min(self.n_sims, self.n_sites, self.n_per_site, self.trees) < 1:
            raise ValueError("all counts must be positive")


@dataclass(frozen=True)
class SimResult:
    leaky: np.ndarray
    guarded: np.ndarray
    leaky_mean: float
    leaky_sd: float
    guarded_mean: float
    guarded_sd: float
    inflation_mean: float
    inflation_ci: tuple[float, float]

    def as_dict(self) -> dict:
        return {
            "n_runs": int(self.leaky.size),
            "leaky_mean": self.leaky_mean, "leaky_sd": self.leaky_sd,
            "guarded_mean": self.guarded_mean, "guarded_sd": self.guarded_sd,
            "inflation_mean": self.inflation_mean,
            "inflation_ci_lower": self.inflation_ci[0],
            "inflation_ci_upper": self.inflation_ci[1],
        }


def gen_site_data(run_seed: int, config: SimConfig) -> Dataset:
    """Latent signal z drives the outcome; the observed predictor x = z + site offset."""
    rng = substream(run_seed, 0)
    n = config.n_sites * config.n_per_site
    site = np.repeat(np.arange(config.n_sites), config.n_per_site)
    z = rng.normal(0.0, 1.0, size=n)
    offsets = rng.normal(config.offset_mean, config.offset_sd, size=config.n_sites)
    x = z + offsets[site]
    p = 1.0 / (1.0 + np.exp(-config.signal_coef * z))
    case = rng.uniform(size=n) < p
    return Dataset((
        categorical_column("site", site, tuple(f"S{i + 1}" for i in range(config.n_sites)),
                           role=Role.GROUP),
        categorical_column("outcome", case.astype(np.int64), ("Control", "Case"),
                           role=Role.OUTCOME),
        numeric_column("x", x),
    ))


def _sitewise_standardize(x: np.ndarray, site: np.ndarray) -> np.ndarray:
    """Per-site centering and scaling computed on the full dataset (the leak)."""
    out = np.empty_like(x)
    for s in np.unique(site):
        rows = site == s
        v = x[rows]
        sd = v.std(ddof=1)
        out[rows] = (v - v.mean()) / (sd if sd > 0 else 1.0)
    return out


def _experiment_spec(config: SimConfig, run_seed: int) -> ExperimentSpec:
    recipe = RecipeSpec((
        Step(StepKind.ROLE_UPDATE, ("site",), role=Role.ID),
        Step(StepKind.NORMALIZE, ("x",)),
    ))
    return ExperimentSpec(
        task=TaskKind.CLASSIFICATION,
        models=(ModelSpec("rand_forest", {"trees": config.trees}),),
        recipe=recipe,
        resampling=ResamplingSpec(method="grouped_cv", folds=config.n_sites,
                                  group_col="site"),
        primary_metric="roc_auc",
        event_class="second",
        bootstrap_enabled=False,
        seed=run_seed,
    )


def run_leakage_iteration(run_seed: int, config: SimConfig) -> tuple[float, float]:
    """(leaky AUC, guarded AUC) for one simulated dataset on shared grouped splits."""
    data = gen_site_data(run_seed, config)
    site_codes = data.column("site").values
    splits = make_group_vfold(site_codes, config.n_sites, seed=mix64(run_seed, 1))

    # Leaky arm: site-wise scaling on all rows before resampling.
    x_scaled = _sitewise_standardize(data.column("x").values, site_codes)
    y = data.column("outcome").values
    leaky_aucs = []
    for si, split in enumerate(splits):
        X_a = x_scaled[split.analysis][:, None]
        X_b = x_scaled[split.assessment][:, None]
        model = fit_model(
            "rand_forest", {"trees": config.trees}, X_a, ("x_scaled",),
            task="classification", y_codes=y[split.analysis], n_levels=2,
            seed=mix64(run_seed, si, 0, 0))
        probs = predict(model, X_b, ("x_scaled",), PredictionKind.CLASS_PROB)
        leaky_aucs.append(roc_auc(probs[:, 1], y[split.assessment] == 1))

    # Guarded arm: the same splits through the fold-local engine path.
    spec = _experiment_spec(config, run_seed)
    records = guarded_resample_fit(spec, data, splits)
    guarded_aucs = [r.metrics["roc_auc"] for r in records]

    return float(np.mean(leaky_aucs)), float(np.mean(guarded_aucs))


def run_leakage_study(config: SimConfig) -> SimResult:
    """n_sims paired runs with derived per-run seeds; 95% t-interval on the
    paired leaky-minus-guarded difference."""
    if config.n_sims < 2:
        raise ValueError("n_sims must be >= 2")
    leaky = np.empty(config.n_sims)
    guarded = np.empty(config.n_sims)
    for i in range(config.n_sims):
        leaky[i], guarded[i] = run_leakage_iteration(mix64(config.seed, i), config)
    diff = leaky - guarded
    mean_d = float(diff.mean())
    sd_d = float(diff.std(ddof=1))
    half = float(_sstats.t.ppf(0.975, config.n_sims - 1)) * sd_d / np.sqrt(config.n_sims)
    return SimResult(
        leaky=leaky, guarded=guarded,
        leaky_mean=float(leaky.mean()), leaky_sd=float(leaky.std(ddof=1)),
        guarded_mean=float(guarded.mean()), guarded_sd=float(guarded.std(ddof=1)),
        inflation_mean=mean_d, inflation_ci=(float(mean_d - half), float(mean_d + half)),
    )


def distribution_summary(values: np.ndarray) -> dict:
    """Five-number summary for a distribution-style figure."""
    qs = np.quantile(values, [0.0, 0.25, 0.5, 0.75, 1.0])
    return {"min": float(qs[0]), "q25": float(qs[1]), "median": float(qs[2]),
            "q75": float(qs[3]), "max": float(qs[4])}
