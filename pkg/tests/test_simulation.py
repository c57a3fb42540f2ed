import numpy as np
import pytest
from scipy import stats

from guardedml._rng import mix64
from guardedml.engine import guarded_resample_fit
from guardedml.learners import fit_logistic
from guardedml.resampling import make_group_vfold
from guardedml.simulation import (
    SimConfig, _experiment_spec, distribution_summary, gen_site_data,
    run_leakage_iteration, run_leakage_study,
)
from guardedml.tabular import Role


class TestGenSiteData:
    def test_shape_and_groups(self):
        ds = gen_site_data(1, SimConfig())
        assert ds.n_rows == 1000
        site = ds.column("site")
        assert site.role is Role.GROUP and len(site.levels) == 10
        assert ds.column("outcome").levels == ("Control", "Case")

    def test_zero_offset_means_x_equals_z(self):
        cfg = SimConfig(offset_mean=0.0, offset_sd=0.0)
        ds = gen_site_data(2, cfg)
        x = ds.column("x").values
        # with no site offsets, x is the latent signal: P(case) = logistic(2x)
        y = ds.column("outcome").values
        fit = fit_logistic(x[:, None], y.astype(float))
        assert fit.coef[0] == pytest.approx(2.0, abs=0.4)

    def test_outcome_independent_of_site_given_signal(self):
        # logistic refit on (x - offset recovery): with offsets zeroed the site
        # dummies carry no signal beyond the latent z
        cfg = SimConfig(offset_mean=0.0, offset_sd=0.0)
        ds = gen_site_data(3, cfg)
        z = ds.column("x").values  # equals the latent signal here
        site = ds.column("site").values
        y = ds.column("outcome").values.astype(float)
        X = np.column_stack([z] + [(site == s).astype(float) for s in range(1, 10)])
        fit = fit_logistic(X, y)
        assert np.abs(fit.coef[1:]).max() < 0.8  # site coefficients near zero

    def test_counts_validated(self):
        with pytest.raises(ValueError):
            SimConfig(n_sites=0)


class TestIteration:
    def test_both_arms_share_splits(self):
        cfg = SimConfig()
        run_seed = mix64(cfg.seed, 0)
        data = gen_site_data(run_seed, cfg)
        site = data.column("site").values
        a = make_group_vfold(site, cfg.n_sites, seed=mix64(run_seed, 1))
        b = make_group_vfold(site, cfg.n_sites, seed=mix64(run_seed, 1))
        for x, y in zip(a, b):
            assert np.array_equal(x.assessment, y.assessment)

    def test_leaky_exceeds_guarded_on_smoke_seeds(self):
        cfg = SimConfig()
        wins = 0
        for i in range(3):
            leaky, guarded = run_leakage_iteration(mix64(777, i), cfg)
            wins += leaky > guarded
        assert wins == 3

    def test_no_heterogeneity_no_leakage_gap(self):
        cfg = SimConfig(offset_sd=0.0, offset_mean=0.0)
        leaky, guarded = run_leakage_iteration(mix64(55, 1), cfg)
        assert abs(leaky - guarded) < 0.05

    def test_guarded_arm_reproducible_standalone(self):
        # no shared mutable state: rerunning the guarded arm alone is bit-exact
        cfg = SimConfig()
        run_seed = mix64(cfg.seed, 4)
        data = gen_site_data(run_seed, cfg)
        splits = make_group_vfold(data.column("site").values, cfg.n_sites,
                                  seed=mix64(run_seed, 1))
        spec = _experiment_spec(cfg, run_seed)
        a = [r.metrics["roc_auc"] for r in guarded_resample_fit(spec, data, splits)]
        b = [r.metrics["roc_auc"] for r in guarded_resample_fit(spec, data, splits)]
        assert a == b


class TestStudy:
    def test_paired_count_and_interval(self):
        res = run_leakage_study(SimConfig(n_sims=2, n_sites=4, n_per_site=40, trees=10))
        assert res.leaky.size == 2 and res.guarded.size == 2
        assert np.isfinite(res.inflation_ci).all()

    def test_t_interval_formula(self):
        diffs = np.array([0.12, 0.15, 0.18, 0.10, 0.20])
        mean = diffs.mean()
        half = stats.t.ppf(0.975, 4) * diffs.std(ddof=1) / np.sqrt(5)
        # the study applies the same formula to its paired differences
        res = run_leakage_study(SimConfig(n_sims=2, n_sites=3, n_per_site=30, trees=5))
        d = res.leaky - res.guarded
        expect_half = stats.t.ppf(0.975, 1) * d.std(ddof=1) / np.sqrt(2)
        assert res.inflation_ci[0] == pytest.approx(d.mean() - expect_half, abs=1e-12)
        assert res.inflation_ci[1] == pytest.approx(d.mean() + expect_half, abs=1e-12)
        assert mean - half == pytest.approx(0.0954636, abs=1e-4)  # hand-checked

    def test_n_sims_floor(self):
        with pytest.raises(ValueError):
            run_leakage_study(SimConfig(n_sims=1))


def test_distribution_summary_keys():
    s = distribution_summary(np.array([1.0, 2.0, 3.0, 4.0]))
    assert set(s) == {"min", "q25", "median", "q75", "max"}
    assert s["min"] == 1.0 and s["max"] == 4.0
