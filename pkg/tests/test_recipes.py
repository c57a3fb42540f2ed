import numpy as np
import pytest

from guardedml.recipes import (
    RecipeAuditError, RecipeError, RecipeSpec, Step, StepKind, apply_recipe,
    audit_recipe, default_recipe, fit_recipe, rejects,
)
from guardedml.tabular import (
    Dataset, Role, categorical_from_strings, numeric_column,
)


def ds_with_outcome(**numeric):
    cols = [numeric_column(k, v) for k, v in numeric.items()]
    n = len(next(iter(numeric.values())))
    cols.append(categorical_from_strings("y", ["a", "b"] * (n // 2) + ["a"] * (n % 2),
                                         role=Role.OUTCOME))
    return Dataset(tuple(cols))


class TestAudit:
    def test_plain_steps_clean(self):
        spec = RecipeSpec((Step(StepKind.IMPUTE_MEDIAN), Step(StepKind.NORMALIZE)))
        assert audit_recipe(spec, ds_with_outcome(x=[1.0, 2.0, 3.0])) == []

    def test_outcome_used_in_transform_rejected(self):
        ds = Dataset((
            numeric_column("x", [1.0, 2.0]),
            numeric_column("y_out", [0.0, 1.0], role=Role.OUTCOME),
        ))
        spec = RecipeSpec((Step(StepKind.CUSTOM_EXPR, (), target="x2",
                                expr_text="x - mean(y_out)"),))
        findings = audit_recipe(spec, ds)
        assert any(f.rule == "S3" and "y_out" in f.message for f in rejects(findings))

    def test_absent_column_selector_rejected(self):
        spec = RecipeSpec((Step(StepKind.NORMALIZE, ("zz",)),))
        findings = audit_recipe(spec, ds_with_outcome(x=[1.0, 2.0]))
        assert any(f.rule == "S1" for f in rejects(findings))

    def test_prefrozen_aggregates_rejected_r4(self):
        spec = RecipeSpec((Step(StepKind.CUSTOM_EXPR, (), target="xs",
                                expr_text="x - mean(x)", frozen={"2": 5.0}),))
        findings = audit_recipe(spec, ds_with_outcome(x=[1.0, 2.0]))
        assert any(f.rule == "R4" for f in rejects(findings))

    def test_role_update_second_outcome_rejected(self):
        spec = RecipeSpec((Step(StepKind.ROLE_UPDATE, ("x",), role=Role.OUTCOME),))
        findings = audit_recipe(spec, ds_with_outcome(x=[1.0, 2.0]))
        assert any(f.rule == "S2" for f in rejects(findings))

    def test_custom_target_may_not_be_outcome(self):
        spec = RecipeSpec((Step(StepKind.CUSTOM_EXPR, (), target="y",
                                expr_text="x + 1"),))
        findings = audit_recipe(spec, ds_with_outcome(x=[1.0, 2.0]))
        assert any(f.rule == "S3" for f in rejects(findings))

    def test_audit_only_mode_skips_column_existence(self):
        spec = RecipeSpec((Step(StepKind.NORMALIZE, ("zz",)),))
        assert audit_recipe(spec, schema=None) == []

    def test_fit_refuses_dirty_spec(self):
        spec = RecipeSpec((Step(StepKind.NORMALIZE, ("zz",)),))
        with pytest.raises(RecipeAuditError):
            fit_recipe(spec, ds_with_outcome(x=[1.0, 2.0]))


class TestFitApply:
    def test_impute_median_frozen(self):
        ds = ds_with_outcome(x=[1.0, np.nan, 3.0])
        fitted = fit_recipe(RecipeSpec((Step(StepKind.IMPUTE_MEDIAN),)), ds)
        assert fitted.steps[0].params == (("x", 2.0),)
        out, _ = apply_recipe(fitted, ds_with_outcome(x=[np.nan, np.nan]))
        assert out.column("x").values.tolist() == [2.0, 2.0]

    def test_normalize_frozen_center_scale(self):
        ds = ds_with_outcome(x=[1.0, 2.0, 3.0])
        fitted = fit_recipe(RecipeSpec((Step(StepKind.NORMALIZE),)), ds)
        assert fitted.steps[0].params == (("x", 2.0, 1.0),)
        out, _ = apply_recipe(fitted, ds_with_outcome(x=[4.0]))
        assert out.column("x").values.tolist() == [2.0]

    def test_dummy_encode_reference_coding(self):
        ds = Dataset((
            categorical_from_strings("c", ["a", "b", "c", "a"]),
            categorical_from_strings("y", ["u", "v", "u", "v"], role=Role.OUTCOME),
        ))
        fitted = fit_recipe(RecipeSpec((Step(StepKind.DUMMY_ENCODE,
                                             "all_categorical_predictors"),)), ds)
        out, _ = apply_recipe(fitted, ds)
        assert out.names == ("c_b", "c_c", "y")
        assert out.column("c_b").values.tolist() == [0.0, 1.0, 0.0, 0.0]
        assert out.column("c_c").values.tolist() == [0.0, 0.0, 1.0, 0.0]

    def test_unseen_level_zero_vector_and_no_refit(self):
        train = Dataset((
            categorical_from_strings("c", ["a", "b", "c"]),
            categorical_from_strings("y", ["u", "v", "u"], role=Role.OUTCOME),
        ))
        spec = RecipeSpec((Step(StepKind.DUMMY_ENCODE, "all_categorical_predictors"),))
        fitted = fit_recipe(spec, train)
        # apply-time data carries the unseen level "d" (code 3 on extended levels)
        apply_ds = Dataset((
            Dataset((categorical_from_strings("c", ["a", "b", "c", "d"]),)).column("c"),
            categorical_from_strings("y", ["u", "v", "u", "v"], role=Role.OUTCOME),
        ))
        out, warnings = apply_recipe(fitted, apply_ds)
        assert out.column("c_b").values.tolist() == [0.0, 1.0, 0.0, 0.0]
        assert out.column("c_c").values.tolist() == [0.0, 0.0, 1.0, 0.0]
        assert any("unseen" in w for w in warnings)
        # refit oracle: had the recipe been refit on the apply data, level "d"
        # would earn its own indicator column -- it must not exist here
        refit = fit_recipe(spec, apply_ds)
        refit_out, _ = apply_recipe(refit, apply_ds)
        assert refit_out.has_column("c_d") and not out.has_column("c_d")

    def test_zero_variance_normalize_target_dropped(self):
        ds = ds_with_outcome(x=[5.0, 5.0, 5.0], z=[1.0, 2.0, 3.0])
        fitted = fit_recipe(RecipeSpec((Step(StepKind.NORMALIZE),)), ds)
        out, _ = apply_recipe(fitted, ds)
        assert not out.has_column("x") and out.has_column("z")
        assert any("zero-variance" in w for w in fitted.warnings)

    def test_all_missing_impute_rejected(self):
        ds = ds_with_outcome(x=[np.nan, np.nan])
        with pytest.raises(RecipeError, match="all-missing"):
            fit_recipe(RecipeSpec((Step(StepKind.IMPUTE_MEDIAN),)), ds)

    def test_column_missing_at_apply_time(self):
        ds = ds_with_outcome(x=[1.0, 2.0])
        fitted = fit_recipe(RecipeSpec((Step(StepKind.NORMALIZE,),)), ds)
        bad = Dataset((numeric_column("other", [1.0]),
                       categorical_from_strings("y", ["a"], role=Role.OUTCOME)))
        with pytest.raises(Exception):
            apply_recipe(fitted, bad)

    def test_sequential_composition(self):
        # normalize runs on the imputed output, so its center sees the filled value
        ds = ds_with_outcome(x=[1.0, np.nan, 3.0])
        fitted = fit_recipe(RecipeSpec((Step(StepKind.IMPUTE_MEDIAN),
                                        Step(StepKind.NORMALIZE))), ds)
        name, center, scale = fitted.steps[1].params[0]
        assert center == 2.0 and scale == 1.0  # imputed {1,2,3}

    def test_custom_expr_step(self):
        ds = ds_with_outcome(x=[1.0, 2.0, 3.0])
        spec = RecipeSpec((Step(StepKind.CUSTOM_EXPR, (), target="xs",
                                expr_text="(x - mean(x)) / sd(x)"),))
        fitted = fit_recipe(spec, ds)
        out, _ = apply_recipe(fitted, ds_with_outcome(x=[4.0]))
        assert out.column("xs").values.tolist() == [2.0]


class TestInvariants:
    def test_leakage_isolation_bit_identical(self):
        rng = np.random.default_rng(1)
        analysis = ds_with_outcome(x=rng.normal(size=20).tolist())
        spec = default_recipe()
        fp1 = fit_recipe(spec, analysis).fingerprint()
        # non-analysis rows changing cannot alter the fit
        fp2 = fit_recipe(spec, analysis).fingerprint()
        assert fp1 == fp2

    def test_fingerprints_differ_across_different_analysis_data(self):
        spec = default_recipe()
        a = fit_recipe(spec, ds_with_outcome(x=[1.0, 2.0, 3.0]))
        b = fit_recipe(spec, ds_with_outcome(x=[1.0, 2.0, 4.0]))
        assert a.fingerprint() != b.fingerprint()

    def test_self_consistency_on_analysis(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=30)
        x[rng.uniform(size=30) < 0.2] = np.nan
        ds = ds_with_outcome(x=x.tolist())
        fitted = fit_recipe(default_recipe(), ds)
        out1, _ = apply_recipe(fitted, ds)
        out2, _ = apply_recipe(fitted, ds)
        assert np.array_equal(out1.column("x").values, out2.column("x").values)

    def test_normalize_apply_twice_is_not_identity(self):
        ds = ds_with_outcome(x=[1.0, 2.0, 3.0])
        fitted = fit_recipe(RecipeSpec((Step(StepKind.NORMALIZE),)), ds)
        once, _ = apply_recipe(fitted, ds)
        twice, _ = apply_recipe(fitted, once)
        assert not np.allclose(once.column("x").values, twice.column("x").values)

    def test_column_count_after_dummy_encode(self):
        ds = Dataset((
            numeric_column("n1", [1.0, 2.0, 3.0]),
            numeric_column("n2", [4.0, 5.0, 6.0]),
            categorical_from_strings("c3", ["a", "b", "c"]),
            categorical_from_strings("y", ["u", "v", "u"], role=Role.OUTCOME),
        ))
        fitted = fit_recipe(RecipeSpec((Step(StepKind.DUMMY_ENCODE,
                                             "all_categorical_predictors"),)), ds)
        out, _ = apply_recipe(fitted, ds)
        predictors = [c for c in out.columns if c.role is Role.PREDICTOR]
        assert len(predictors) == 2 + (3 - 1)

    def test_empty_analysis_rejected(self):
        ds = ds_with_outcome(x=[1.0])
        from guardedml.tabular import subset_rows
        with pytest.raises(RecipeError, match="empty"):
            fit_recipe(RecipeSpec(()), subset_rows(ds, []))
