"""Sum-of-trees posteriors: probit and continuous fits, GPS composition,
serialization round trips."""

import numpy as np
import pytest
from scipy.special import expit

from multitreat import BartPriors, ValidationError
from multitreat.bart import (
    bart_from_text,
    fit_continuous_bart,
    fit_multinomial_bart_gps,
    fit_probit_bart,
)

FAST = BartPriors(n_trees=20)


class TestProbit:
    def test_all_ones_outcome_pushes_probability_up(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(200, 2))
        fit = fit_probit_bart(X, np.ones(200), ndpost=50, burn=50,
                              priors=FAST, seed=1)
        assert fit.insample_probabilities.mean() >= 0.95

    def test_binary_covariate_recovers_group_rates(self):
        rng = np.random.default_rng(1)
        x = rng.binomial(1, 0.5, 2000).astype(float)[:, None]
        p = np.where(x[:, 0] == 1, 0.8, 0.2)
        y = (rng.random(2000) < p).astype(float)
        fit = fit_probit_bart(x, y, ndpost=100, burn=100, priors=FAST, seed=2)
        pred = fit.predict(np.array([[0.0], [1.0]])).draws.mean(axis=0)
        assert abs(pred[0] - 0.2) < 0.05
        assert abs(pred[1] - 0.8) < 0.05

    def test_same_seed_reproduces_fit(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(120, 2))
        y = (rng.random(120) < 0.4).astype(float)
        a = fit_probit_bart(X, y, ndpost=30, burn=20, priors=FAST, seed=7)
        b = fit_probit_bart(X, y, ndpost=30, burn=20, priors=FAST, seed=7)
        np.testing.assert_array_equal(a.draws_f, b.draws_f)

    def test_out_of_sample_path_matches_training_path(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(150, 3))
        y = (rng.random(150) < expit(X[:, 0])).astype(float)
        fit = fit_probit_bart(X, y, ndpost=25, burn=25, priors=FAST, seed=3)
        np.testing.assert_allclose(fit.predict(X).draws,
                                   fit.insample_probabilities, atol=1e-10)

    def test_duplicated_rows_predict_identically(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(100, 2))
        y = (rng.random(100) < 0.5).astype(float)
        fit = fit_probit_bart(X, y, ndpost=20, burn=20, priors=FAST, seed=4)
        X_new = np.vstack([X[:5], X[:5]])
        pred = fit.predict(X_new).draws
        np.testing.assert_array_equal(pred[:, :5], pred[:, 5:])

    def test_monotone_signal_recovered_on_grid(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(-2, 2, 4000)[:, None]
        y = (rng.random(4000) < expit(2.0 * x[:, 0])).astype(float)
        fit = fit_probit_bart(x, y, ndpost=100, burn=100, priors=FAST, seed=5)
        grid = np.linspace(-2, 2, 5)[:, None]
        means = fit.predict(grid).draws.mean(axis=0)
        assert np.all(np.diff(means) > 0)

    def test_calibration_of_overall_rate(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(1000, 3))
        y = (rng.random(1000) < expit(0.3 + 0.8 * X[:, 0])).astype(float)
        fit = fit_probit_bart(X, y, ndpost=80, burn=80, priors=FAST, seed=6)
        assert abs(fit.insample_probabilities.mean() - y.mean()) < 0.03

    def test_wrong_prediction_width_rejected(self):
        rng = np.random.default_rng(7)
        X = rng.normal(size=(60, 2))
        y = (rng.random(60) < 0.5).astype(float)
        fit = fit_probit_bart(X, y, ndpost=15, burn=10, priors=FAST, seed=7)
        with pytest.raises(ValidationError, match="columns"):
            fit.predict(np.zeros((4, 3)))


class TestContinuous:
    def test_constant_outcome_short_circuits(self):
        rng = np.random.default_rng(8)
        X = rng.normal(size=(80, 2))
        fit = fit_continuous_bart(X, np.full(80, 3.25), ndpost=20, burn=10,
                                  priors=FAST, seed=8)
        np.testing.assert_allclose(fit.insample_values, 3.25, atol=1e-6)
        np.testing.assert_allclose(fit.predict(X[:4]), 3.25, atol=1e-6)
        assert np.all(fit.draws_sigma == 0)

    def test_friedman_surface_beats_half_sd(self):
        rng = np.random.default_rng(9)
        n = 400
        X = rng.uniform(size=(n, 5))
        f = (10 * np.sin(np.pi * X[:, 0] * X[:, 1]) + 20 * (X[:, 2] - 0.5) ** 2
             + 10 * X[:, 3] + 5 * X[:, 4])
        y = f + rng.normal(0, 1.0, n)
        fit = fit_continuous_bart(X, y, ndpost=150, burn=150,
                                  priors=BartPriors(n_trees=50), seed=9)
        rmse = np.sqrt(np.mean((fit.insample_values.mean(axis=0) - f) ** 2))
        assert rmse < 0.5 * y.std()

    def test_error_sd_recovered(self):
        rng = np.random.default_rng(10)
        n = 600
        X = rng.uniform(size=(n, 2))
        y = 2.0 * X[:, 0] + rng.normal(0, 0.3, n)
        fit = fit_continuous_bart(X, y, ndpost=150, burn=150,
                                  priors=BartPriors(n_trees=50), seed=10)
        sigma_hat = fit.draws_sigma.mean()
        assert abs(sigma_hat - 0.3) < 0.06


class TestGpsComposition:
    def test_two_arm_columns_are_complementary(self):
        rng = np.random.default_rng(11)
        X = rng.normal(size=(150, 2))
        w = rng.integers(1, 3, 150)
        gps = fit_multinomial_bart_gps(X, w, M1=10, gap=2, burn=30,
                                       priors=FAST, seed=11)
        np.testing.assert_allclose(gps.gps_draws[:, 0, :] + gps.gps_draws[:, 1, :],
                                   1.0, atol=1e-8)

    def test_shapes_and_mean_shares(self):
        rng = np.random.default_rng(12)
        X = rng.normal(size=(100, 2))
        w = np.repeat([1, 2, 3], [40, 30, 30])
        gps = fit_multinomial_bart_gps(X, w, M1=50, gap=2, burn=30,
                                       priors=FAST, seed=12)
        assert gps.gps_draws.shape == (50, 3, 100)
        assert gps.m1 == 50
        shares = gps.mean_gps().values.mean(axis=0)
        np.testing.assert_allclose(shares, [0.4, 0.3, 0.3], atol=0.07)

    def test_rows_live_on_simplex_per_draw(self):
        rng = np.random.default_rng(13)
        X = rng.normal(size=(90, 2))
        w = rng.integers(1, 4, 90)
        gps = fit_multinomial_bart_gps(X, w, M1=5, gap=1, burn=10,
                                       priors=FAST, seed=13)
        np.testing.assert_allclose(gps.gps_draws.sum(axis=1), 1.0, atol=1e-8)

    def test_missing_arm_rejected(self):
        X = np.zeros((20, 1))
        with pytest.raises(ValidationError, match="1..T"):
            fit_multinomial_bart_gps(X, np.repeat([1, 3], 10), M1=2, seed=0)

    def test_tiny_arm_warns(self):
        rng = np.random.default_rng(14)
        X = rng.normal(size=(40, 1))
        w = np.repeat([1, 2], [37, 3])
        with pytest.warns(UserWarning, match="fewer than 5"):
            fit_multinomial_bart_gps(X, w, M1=2, gap=1, burn=5,
                                     priors=FAST, seed=1)


class TestSerialization:
    def test_probit_round_trip_predicts_identically(self):
        rng = np.random.default_rng(15)
        X = rng.normal(size=(80, 2))
        y = (rng.random(80) < 0.5).astype(float)
        fit = fit_probit_bart(X, y, ndpost=12, burn=10, priors=FAST, seed=15)
        back = bart_from_text(fit.to_text())
        X_new = rng.normal(size=(25, 2))
        np.testing.assert_array_equal(back.predict(X_new).draws,
                                      fit.predict(X_new).draws)

    def test_continuous_round_trip_keeps_scale_and_sigma(self):
        rng = np.random.default_rng(16)
        X = rng.normal(size=(70, 2))
        y = 5.0 + 2.0 * X[:, 0] + rng.normal(0, 0.5, 70)
        fit = fit_continuous_bart(X, y, ndpost=15, burn=10, priors=FAST, seed=16)
        back = bart_from_text(fit.to_text())
        np.testing.assert_array_equal(back.predict(X[:6]), fit.predict(X[:6]))
        np.testing.assert_array_equal(back.draws_sigma, fit.draws_sigma)

    def test_corrupt_header_rejected(self):
        with pytest.raises(ValidationError):
            bart_from_text("not-a-fit\n")


class TestPriors:
    def test_proposal_mix_must_sum_to_one(self):
        with pytest.raises(ValidationError, match="sum to 1"):
            BartPriors(p_grow=0.5, p_prune=0.5, p_change=0.5, p_swap=0.1)

    def test_variant_defaults(self):
        p = BartPriors()
        assert p.resolve_trees("probit") == 50
        assert p.resolve_trees("continuous") == 200
        assert BartPriors(n_trees=7).resolve_trees("probit") == 7
