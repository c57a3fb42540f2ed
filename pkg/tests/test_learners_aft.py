import numpy as np
import pytest
from scipy import optimize

from guardedml._rng import substream
from guardedml.learners import FitError
from guardedml.learners.aft import (
    AftIntervalTargets, build_aft_interval_targets, fit_gbm, fit_weibull_aft,
    gbm_loss_gradients, gbm_predict, weibull_location,
)


class TestWeibull:
    def test_exponential_scale_recovery(self):
        rng = substream(61)
        n = 5000
        x = rng.normal(size=(n, 1))
        t_event = rng.exponential(1.0, size=n) * np.exp(0.5 * x[:, 0])
        t_cens = rng.exponential(3.0, size=n)
        time = np.minimum(t_event, t_cens)
        status = (t_event <= t_cens).astype(float)
        fit = fit_weibull_aft(x, time, status)
        assert 0.95 <= fit.scale <= 1.05
        assert fit.coef[0] == pytest.approx(0.5, abs=0.08)

    def test_uncensored_intercept_only_matches_optimizer_oracle(self):
        rng = substream(62)
        time = rng.weibull(1.7, size=400) * 3.0
        status = np.ones(400)
        fit = fit_weibull_aft(np.empty((400, 0)), time, status)
        y = np.log(time)

        def nll(theta):
            mu, s = theta
            sigma = np.exp(s)
            w = (y - mu) / sigma
            return -np.sum(w - np.exp(w) - s)

        res = optimize.minimize(nll, [y.mean(), 0.0], method="Nelder-Mead",
                                options={"xatol": 1e-12, "fatol": 1e-12, "maxiter": 10000})
        assert fit.intercept == pytest.approx(res.x[0], abs=1e-6)
        assert fit.log_scale == pytest.approx(res.x[1], abs=1e-6)

    def test_all_censored_rejected(self):
        with pytest.raises(FitError, match="at least one event"):
            fit_weibull_aft(np.ones((5, 1)), np.arange(1.0, 6.0), np.zeros(5))

    def test_gradient_norm_at_convergence(self):
        rng = substream(63)
        n = 300
        x = rng.normal(size=(n, 2))
        t = rng.weibull(1.3, size=n) * np.exp(x @ [0.4, -0.2])
        status = (rng.uniform(size=n) < 0.7).astype(float)
        status[0] = 1.0
        fit = fit_weibull_aft(x, t, status)
        from guardedml.learners.aft import _weibull_ll_grad_hess
        theta = np.concatenate([[fit.intercept], fit.coef, [fit.log_scale]])
        _, grad, _ = _weibull_ll_grad_hess(theta, x, np.log(t), status)
        assert np.abs(grad).max() < 1e-6

    def test_location_prediction(self):
        rng = substream(64)
        x = rng.normal(size=(100, 1))
        t = np.exp(1.0 + 2.0 * x[:, 0] + 0.3 * rng.gumbel(size=100))
        fit = fit_weibull_aft(x, t, np.ones(100))
        loc = weibull_location(fit, x)
        assert np.corrcoef(loc, np.log(t))[0, 1] > 0.98


class TestIntervalTargets:
    def test_event_row(self):
        targets = build_aft_interval_targets([5.0], [1.0])
        assert targets.lower[0] == pytest.approx(np.log(5.0))
        assert targets.upper[0] == targets.lower[0]

    def test_censored_row(self):
        targets = build_aft_interval_targets([5.0], [0.0])
        assert targets.lower[0] == pytest.approx(np.log(5.0))
        assert np.isinf(targets.upper[0])

    def test_nonpositive_time_rejected(self):
        with pytest.raises(FitError, match="positive"):
            build_aft_interval_targets([0.0], [1.0])

    def test_start_stop_rejected(self):
        with pytest.raises(FitError, match="start-stop"):
            build_aft_interval_targets([5.0], [1.0], start=[1.0])

    def test_property_over_random_rows(self):
        rng = substream(65)
        time = rng.exponential(2.0, size=1000) + 1e-6
        status = (rng.uniform(size=1000) < 0.6).astype(float)
        targets = build_aft_interval_targets(time, status)
        events = status > 0
        assert np.all((targets.upper == targets.lower) == events)
        assert np.all(np.isinf(targets.upper) == ~events)


class TestGbm:
    def test_zero_rounds_constant_prediction(self):
        rng = substream(66)
        X = rng.normal(size=(50, 2))
        t = rng.exponential(1.0, size=50)
        status = np.ones(50)
        targets = build_aft_interval_targets(t, status)
        fit = fit_gbm(X, targets, "aft_normal", rounds=0)
        assert fit.base_score == pytest.approx(np.median(np.log(t)))
        assert np.allclose(gbm_predict(fit, X), fit.base_score)

    def test_aft_gradients_match_finite_differences(self):
        rng = substream(67)
        n = 100
        eta = rng.normal(size=n) * 2.0
        time = rng.exponential(1.0, size=n) + 0.05
        status = (rng.uniform(size=n) < 0.5).astype(float)
        targets = build_aft_interval_targets(time, status)
        sigma = 0.9
        loss, g, h = gbm_loss_gradients(eta, targets, "aft_normal", sigma)
        eps = 1e-5
        lp, gp, _ = gbm_loss_gradients(eta + eps, targets, "aft_normal", sigma)
        lm, gm, _ = gbm_loss_gradients(eta - eps, targets, "aft_normal", sigma)
        g_fd = (lp - lm) / (2 * eps)
        h_fd = (gp - gm) / (2 * eps)
        assert np.max(np.abs(g - g_fd) / np.maximum(np.abs(g_fd), 1e-3)) < 1e-5
        assert np.max(np.abs(h - h_fd) / np.maximum(np.abs(h_fd), 1e-3)) < 1e-5

    def test_squared_loss_rmse_non_increasing(self):
        rng = substream(68)
        X = rng.normal(size=(150, 1))
        y = 2.0 * X[:, 0]
        fit = fit_gbm(X, y, "squared", rounds=50)
        losses = np.asarray(fit.train_loss)
        assert np.all(np.diff(losses) <= 0)
        assert losses[-1] < losses[0] * 0.2

    def test_aft_nll_non_increasing(self):
        rng = substream(69)
        n = 300
        X = rng.normal(size=(n, 2))
        t = np.exp(0.5 * X[:, 0] + rng.normal(size=n) * 0.5)
        status = (rng.uniform(size=n) < 0.7).astype(float)
        status[0] = 1.0
        targets = build_aft_interval_targets(t, status)
        fit = fit_gbm(X, targets, "aft_normal", rounds=100)
        assert np.all(np.diff(np.asarray(fit.train_loss)) <= 0)

    def test_no_events_rejected(self):
        rng = substream(70)
        targets = build_aft_interval_targets(rng.exponential(1.0, size=10) + 0.1,
                                             np.zeros(10))
        with pytest.raises(FitError, match="at least one event"):
            fit_gbm(rng.normal(size=(10, 1)), targets, "aft_normal")

    def test_squared_loss_learns_signal(self):
        rng = substream(71)
        X = rng.normal(size=(200, 1))
        y = 2.0 * X[:, 0]
        fit = fit_gbm(X, y, "squared", rounds=100)
        pred = gbm_predict(fit, X)
        assert np.sqrt(np.mean((pred - y) ** 2)) < 0.3

    def test_hessians_clamped_positive(self):
        # comfortably-surviving censored rows drive h to ~0; clamping keeps leaves finite
        eta = np.array([50.0, 50.0])
        targets = AftIntervalTargets(np.log(np.array([1.0, 2.0])), np.array([np.inf, np.inf]))
        _, g, h = gbm_loss_gradients(eta, targets, "aft_normal", 1.0)
        assert np.all(np.isfinite(g)) and np.all(h >= 0)
