import numpy as np
import pytest

from conftest import make_classification_ds, make_survival_ds
from guardedml._rng import substream
from guardedml.engine import (
    CvSummary, ExperimentError, ExperimentSpec, guarded_resample_fit,
    leaky_resample_fit, run_experiment, select_best, strata_values,
    summarize_records, train_test_split, tune_grid,
)
from guardedml.learners import ModelSpec
from guardedml.recipes import RecipeAuditError, RecipeSpec, Step, StepKind, default_recipe
from guardedml.resampling import GuardError, ResampleSplit, ResamplingSpec, make_splits
from guardedml.tabular import Dataset, Role, TaskKind, subset_rows


def cls_spec(models, recipe=None, resampling=None, **kw):
    return ExperimentSpec(
        task=TaskKind.CLASSIFICATION,
        models=tuple(models),
        recipe=recipe or default_recipe(),
        resampling=resampling or ResamplingSpec(method="cv", folds=5),
        primary_metric="roc_auc",
        bootstrap_samples=kw.pop("bootstrap_samples", 30),
        **kw,
    )


@pytest.fixture(scope="module")
def cls_ds():
    return make_classification_ds(substream(100), n=200, missing_rate=0.05)


class TestTrainTestSplit:
    def test_default_fraction(self):
        ds = make_classification_ds(substream(101), n=100)
        train, test = train_test_split(ds, 0.2, seed=1)
        assert train.n_rows == 80 and test.n_rows == 20

    def test_stratification_preserves_class_ratio(self):
        ds = make_classification_ds(substream(102), n=200)
        y = ds.columns_with_role(Role.OUTCOME)[0].values
        train, test = train_test_split(ds, 0.2, strata=y, seed=2)
        y_test = test.columns_with_role(Role.OUTCOME)[0].values
        expected = (y == 1).sum() * 0.2
        assert abs((y_test == 1).sum() - expected) <= 1

    def test_zero_fraction_rejected(self):
        ds = make_classification_ds(substream(103), n=50)
        with pytest.raises((ExperimentError, GuardError)):
            train_test_split(ds, 0.0)


class TestGuardedResampleFit:
    def test_fold_record_count(self, cls_ds):
        spec = cls_spec([ModelSpec("logistic_reg", {})])
        splits = make_splits(spec.resampling, cls_ds.n_rows, seed=5)
        records = guarded_resample_fit(spec, cls_ds, splits)
        assert len(records) == 5
        assert all(r.tag == "guarded" for r in records)

    def test_full_analysis_split_aborts(self, cls_ds):
        spec = cls_spec([ModelSpec("logistic_reg", {})])
        bad = [ResampleSplit(np.arange(cls_ds.n_rows), np.array([3]), "bad")]
        with pytest.raises(GuardError, match="cover the full dataset"):
            guarded_resample_fit(spec, cls_ds, bad)

    def test_dirty_recipe_aborts(self, cls_ds):
        recipe = RecipeSpec((Step(StepKind.CUSTOM_EXPR, (), target="z",
                                  expr_text="read_file(x1)"),))
        spec = cls_spec([ModelSpec("logistic_reg", {})], recipe=recipe)
        splits = make_splits(spec.resampling, cls_ds.n_rows, seed=5)
        with pytest.raises(RecipeAuditError):
            guarded_resample_fit(spec, cls_ds, splits)

    def test_fingerprints_differ_across_folds(self, cls_ds):
        spec = cls_spec([ModelSpec("logistic_reg", {})])
        splits = make_splits(spec.resampling, cls_ds.n_rows, seed=5)
        records = guarded_resample_fit(spec, cls_ds, splits)
        fps = {r.recipe_fingerprint for r in records}
        assert len(fps) == len(records)

    def test_guarded_equals_leaky_for_data_independent_recipe(self):
        # equality oracle: with no data-estimated parameters the two paths
        # must produce bit-identical per-fold predictions
        ds = make_classification_ds(substream(104), n=500)
        recipe = RecipeSpec((
            Step(StepKind.CUSTOM_EXPR, (), target="lx", expr_text="log(exp(x1))"),
            Step(StepKind.DUMMY_ENCODE, "all_categorical_predictors"),
        ))
        spec = cls_spec([ModelSpec("rand_forest", {"trees": 10})], recipe=recipe, seed=77)
        splits = make_splits(spec.resampling, ds.n_rows, seed=9)
        guarded = guarded_resample_fit(spec, ds, splits, keep_predictions=True)
        leaky = leaky_resample_fit(spec, ds, splits, keep_predictions=True, unsafe=True)
        for g, l in zip(guarded, leaky):
            assert np.array_equal(g.predictions, l.predictions)

    def test_leaky_requires_unsafe_flag(self, cls_ds):
        spec = cls_spec([ModelSpec("logistic_reg", {})])
        splits = make_splits(spec.resampling, cls_ds.n_rows, seed=5)
        with pytest.raises(ExperimentError, match="unsafe"):
            leaky_resample_fit(spec, cls_ds, splits)

    def test_data_dependent_recipe_differs_between_paths(self, cls_ds):
        spec = cls_spec([ModelSpec("logistic_reg", {})], seed=3)
        splits = make_splits(spec.resampling, cls_ds.n_rows, seed=5)
        guarded = guarded_resample_fit(spec, cls_ds, splits, keep_predictions=True)
        leaky = leaky_resample_fit(spec, cls_ds, splits, keep_predictions=True, unsafe=True)
        assert any(not np.array_equal(g.predictions, l.predictions)
                   for g, l in zip(guarded, leaky))
        assert all(r.tag == "LEAKY" for r in leaky)


class TestTuneAndSelect:
    def test_grid_size(self, cls_ds):
        spec = cls_spec([ModelSpec("decision_tree", {},
                                   tune={"max_depth": [2, 4, 6], "min_n": [5, 10]})])
        splits = make_splits(spec.resampling, cls_ds.n_rows, seed=5)
        records, summaries, best = tune_grid(spec, cls_ds, splits)
        assert len(summaries) == 6
        assert len(records) == 6 * 5

    def test_single_value_grid_is_fixed_setting(self, cls_ds):
        spec = cls_spec([ModelSpec("rand_forest", {}, tune={"trees": [20]})])
        splits = make_splits(spec.resampling, cls_ds.n_rows, seed=5)
        records, summaries, best = tune_grid(spec, cls_ds, splits)
        assert len(summaries) == 1
        assert best["rand_forest"]["trees"] == 20

    def test_tie_prefers_earlier_grid_order(self):
        a = CvSummary("m", 0, {"p": 1}, 0.9, 0.1, 5, 5)
        b = CvSummary("m", 1, {"p": 2}, 0.9, 0.1, 5, 5)
        assert select_best([a, b], "maximize") is a

    def test_tie_prefers_lower_sd(self):
        a = CvSummary("m", 0, {}, 0.9, 0.2, 5, 5)
        b = CvSummary("m", 1, {}, 0.9, 0.1, 5, 5)
        assert select_best([a, b], "maximize") is b

    def test_select_best_maximize_and_minimize(self):
        ms = [CvSummary(f"m{i}", 0, {}, v, 0.01, 5, 5)
              for i, v in enumerate([0.9906, 0.9847, 0.9230])]
        assert select_best(ms, "maximize").model_id == "m0"
        ms = [CvSummary(f"m{i}", 0, {}, v, 0.01, 5, 5)
              for i, v in enumerate([12.63, 14.37, 23.65])]
        assert select_best(ms, "minimize").model_id == "m0"

    def test_summary_mean_is_arithmetic(self, cls_ds):
        spec = cls_spec([ModelSpec("logistic_reg", {})])
        splits = make_splits(spec.resampling, cls_ds.n_rows, seed=5)
        records = guarded_resample_fit(spec, cls_ds, splits)
        summary = summarize_records(records, "roc_auc")[0]
        vals = [r.metrics["roc_auc"] for r in records]
        assert summary.mean == pytest.approx(np.mean(vals), abs=1e-15)
        assert summary.n_defined == 5

    def test_undefined_fold_metric_recorded_missing(self):
        # an assessment fold with a single class makes roc_auc undefined
        ds = make_classification_ds(substream(105), n=12)
        y = ds.columns_with_role(Role.OUTCOME)[0].values
        pos = np.flatnonzero(y == y[0])[:3]
        rest = np.setdiff1d(np.arange(12), pos)
        splits = [ResampleSplit(rest, pos, "Degenerate"),
                  ResampleSplit(pos, rest, "Mixed")]
        spec = cls_spec([ModelSpec("decision_tree", {"max_depth": 2})])
        records = guarded_resample_fit(spec, ds, splits)
        assert records[0].metrics["roc_auc"] is None
        summary = summarize_records(records, "roc_auc")[0]
        assert summary.n_folds == 2 and summary.n_defined == 1


class TestRunExperiment:
    def test_selection_ignores_test_rows(self, cls_ds):
        spec = cls_spec([ModelSpec("logistic_reg", {}),
                         ModelSpec("decision_tree", {"max_depth": 3})],
                        bootstrap_enabled=False)
        train, test = train_test_split(cls_ds, 0.2, strata_values(spec, cls_ds), spec.seed)
        full = run_experiment(spec, train, test)
        permuted = run_experiment(
            spec, train, subset_rows(test, np.random.default_rng(0).permutation(test.n_rows)))
        assert full.selected_model == permuted.selected_model
        assert [ (s.model_id, s.mean, s.sd) for s in full.cv_table ] == \
               [ (s.model_id, s.mean, s.sd) for s in permuted.cv_table ]

    def test_workers_do_not_change_results(self, cls_ds):
        base = cls_spec([ModelSpec("logistic_reg", {}),
                         ModelSpec("rand_forest", {"trees": 10})], seed=5)
        r1 = run_experiment(base, cls_ds)
        r4 = run_experiment(
            cls_spec([ModelSpec("logistic_reg", {}),
                      ModelSpec("rand_forest", {"trees": 10})], seed=5, workers=4), cls_ds)
        assert [(s.model_id, s.mean, s.sd) for s in r1.cv_table] == \
               [(s.model_id, s.mean, s.sd) for s in r4.cv_table]
        for a, b in zip(r1.holdout, r4.holdout):
            for ma, mb in zip(a.metrics, b.metrics):
                assert (ma.name, ma.estimate, ma.lower, ma.upper) == \
                       (mb.name, mb.estimate, mb.lower, mb.upper)

    def test_none_resampling_skips_cv(self):
        ds = make_survival_ds(substream(106), n=120)
        spec = ExperimentSpec(
            task=TaskKind.SURVIVAL,
            models=(ModelSpec("cox_ph", {}),),
            recipe=default_recipe(),
            resampling=ResamplingSpec(method="none"),
            primary_metric="c_index",
            bootstrap_enabled=False,
        )
        res = run_experiment(spec, ds)
        assert res.cv_table == () and res.selected_model is None
        assert len(res.holdout) == 1

    def test_none_resampling_rejects_multivalue_grids(self, cls_ds):
        spec = cls_spec([ModelSpec("decision_tree", {}, tune={"max_depth": [2, 3]})],
                        resampling=ResamplingSpec(method="none"))
        with pytest.raises(ExperimentError, match="resampling"):
            run_experiment(spec, cls_ds)

    def test_refit_fingerprint_matches_fresh_fit(self, cls_ds):
        from guardedml.recipes import fit_recipe
        spec = cls_spec([ModelSpec("logistic_reg", {})], bootstrap_enabled=False)
        train, test = train_test_split(cls_ds, 0.2, strata_values(spec, cls_ds), spec.seed)
        res = run_experiment(spec, train, test)
        assert res.refit_fingerprint == fit_recipe(spec.recipe, train).fingerprint()

    def test_invalid_primary_metric(self, cls_ds):
        spec = cls_spec([ModelSpec("logistic_reg", {})])
        spec = ExperimentSpec(**{**spec.__dict__, "primary_metric": "rmse"})
        with pytest.raises(ExperimentError, match="not valid"):
            run_experiment(spec, cls_ds)

    def test_selected_marker_unique(self, cls_ds):
        from guardedml.report import render_report
        spec = cls_spec([ModelSpec("logistic_reg", {}),
                         ModelSpec("decision_tree", {"max_depth": 3})],
                        bootstrap_enabled=False)
        report = render_report(run_experiment(spec, cls_ds))
        assert report.count("† Selected") == 1
        assert "Table 1" in report and "Table 2" in report
