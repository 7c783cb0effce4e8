"""Propensity and outcome learners: GPS models, posterior logit, stacking,
balance diagnostics, one-dimensional k-means."""

import numpy as np
import pytest
from scipy.special import expit

from multitreat import (
    BayesLogit,
    MultinomialLogit,
    StackedEnsemble,
    StackedGps,
    ValidationError,
    kmeans_1d,
)
from multitreat.learners import BoostedTrees, balance_statistic


class TestMultinomialLogit:
    def test_balanced_arms_constant_covariate_gives_zero_coefficients(self):
        X = np.zeros((90, 1))
        w = np.tile([1, 2, 3], 30)
        m = MultinomialLogit().fit(X, w)
        assert m.converged_
        np.testing.assert_allclose(m.coef_, 0.0, atol=1e-6)
        np.testing.assert_allclose(m.predict_gps(X).values, 1 / 3, atol=1e-6)

    def test_two_by_two_design_recovers_exact_log_odds(self):
        # cells: x=0 -> 30 treated / 10 control, x=1 -> 10 treated / 30 control
        x = np.repeat([0.0, 1.0], 40)[:, None]
        w = np.concatenate([np.repeat([1, 2], [30, 10]), np.repeat([1, 2], [10, 30])])
        m = MultinomialLogit(ridge=0.0).fit(x, w)
        intercept, slope = m.coef_[0]
        assert abs(intercept - np.log(3)) < 1e-6
        assert abs(slope + np.log(9)) < 1e-6
        gps = m.predict_gps(np.array([[0.0], [1.0]]))
        np.testing.assert_allclose(gps.values[:, 0], [0.75, 0.25], atol=1e-6)

    def test_predict_rows_are_simplex(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(200, 3))
        w = rng.integers(1, 4, 200)
        gps = MultinomialLogit().fit(X, w).predict_gps(X)
        np.testing.assert_allclose(gps.values.sum(axis=1), 1.0, atol=1e-10)

    def test_missing_arm_label_rejected(self):
        X = np.zeros((10, 1))
        with pytest.raises(ValidationError, match="1..T"):
            MultinomialLogit().fit(X, np.repeat([1, 3], 5))

    def test_separated_classes_warn(self):
        x = np.repeat([-0.01, 0.01], 20)[:, None]
        w = np.repeat([1, 2], 20)
        with pytest.warns(UserWarning, match="separated"):
            MultinomialLogit(max_iter=200).fit(x, w)

    def test_covariate_translation_only_shifts_intercept(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(300, 2))
        w = rng.integers(1, 4, 300)
        a = MultinomialLogit().fit(X, w)
        shifted = X.copy()
        shifted[:, 0] += 7.0
        b = MultinomialLogit().fit(shifted, w)
        np.testing.assert_allclose(b.predict_gps(shifted).values,
                                   a.predict_gps(X).values, atol=1e-8)


class TestBayesLogit:
    @staticmethod
    def _data(n, seed=0):
        rng = np.random.default_rng(seed)
        design = np.column_stack([rng.normal(1.0, 1.0, n), rng.normal(2.0, 1.5, n)])
        p = expit(0.5 - 1.0 * design[:, 0] + 0.25 * design[:, 1])
        return design, (rng.random(n) < p).astype(float)

    def test_map_recovers_coefficients_within_three_se(self):
        design, y = self._data(5000)
        m = BayesLogit(ndpost=10, seed=1).fit(design, y)
        se = np.sqrt(np.diag(m.covariance_))
        np.testing.assert_array_less(np.abs(m.center_ - [0.5, -1.0, 0.25]), 3 * se)

    def test_draw_covariance_matches_analytic(self):
        design, y = self._data(1500, seed=3)
        m = BayesLogit(ndpost=20_000, seed=5).fit(design, y)
        emp = np.cov(m.draws_, rowvar=False)
        rel = np.linalg.norm(emp - m.covariance_) / np.linalg.norm(m.covariance_)
        assert rel < 0.10

    def test_same_seed_reproduces_draws(self):
        design, y = self._data(400, seed=2)
        a = BayesLogit(ndpost=50, seed=9).fit(design, y)
        b = BayesLogit(ndpost=50, seed=9).fit(design, y)
        np.testing.assert_array_equal(a.draws_, b.draws_)

    def test_probability_draws_shape_and_range(self):
        design, y = self._data(300, seed=4)
        m = BayesLogit(ndpost=25, seed=0).fit(design, y)
        prob = m.predict_proba_draws(design[:40])
        assert prob.shape == (25, 40)
        assert prob.min() > 0 and prob.max() < 1

    def test_needs_at_least_two_draws(self):
        design, y = self._data(100)
        with pytest.raises(ValidationError):
            BayesLogit(ndpost=1).fit(design, y)


class TestBoostedTrees:
    def test_independent_treatment_stops_early(self):
        rng = np.random.default_rng(10)
        X = rng.normal(size=(2000, 3))
        w = rng.integers(1, 4, 2000)
        m = BoostedTrees(n_trees_max=300, check_every=50, seed=0).fit(X, w)
        assert m.n_trees_used_ <= 100
        assert [step for step, _ in m.balance_trace_] == [50, 100, 150, 200, 250, 300]
        assert m.best_balance_ == min(bal for _, bal in m.balance_trace_)

    def test_confounded_single_covariate_reaches_balance(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(1500, 1))
        p1 = expit(0.9 * x[:, 0])
        w = 1 + (rng.random(1500) < p1).astype(int)
        raw = balance_statistic(x, w, np.full((1500, 2), 0.5))
        assert raw > 0.8
        m = BoostedTrees(n_trees_max=1000, check_every=100, seed=1).fit(x, w)
        fitted = balance_statistic(x, w, m.predict_gps(x).values)
        assert fitted < 0.2
        assert fitted <= raw

    def test_predict_rows_are_simplex(self):
        rng = np.random.default_rng(12)
        X = rng.normal(size=(200, 2))
        w = rng.integers(1, 4, 200)
        m = BoostedTrees(n_trees_max=100, check_every=50, seed=2).fit(X, w)
        gps = m.predict_gps(X)
        np.testing.assert_allclose(gps.values.sum(axis=1), 1.0, atol=1e-10)


class TestBalanceStatistic:
    def test_true_gps_weights_remove_confounding(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(100_000, 1))
        p1 = expit(1.5 * x[:, 0])
        w = 1 + (rng.random(100_000) >= p1).astype(int)
        gps = np.column_stack([p1, 1 - p1])
        assert balance_statistic(x, w, np.full_like(gps, 0.5)) > 0.5
        assert balance_statistic(x, w, gps) < 0.03

    def test_att_requires_reference(self):
        x = np.zeros((10, 1))
        w = np.tile([1, 2], 5)
        gps = np.full((10, 2), 0.5)
        with pytest.raises(ValidationError):
            balance_statistic(x, w, gps, estimand="ATT")
        assert balance_statistic(x, w, gps, estimand="ATT", reference=1) == 0.0


class TestStackedEnsemble:
    @staticmethod
    def _logistic_data(n, seed=0):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(n, 3))
        p = expit(0.4 + X @ np.array([0.8, -0.6, 0.3]))
        return X, (rng.random(n) < p).astype(float)

    def test_single_learner_gets_weight_one(self):
        X, y = self._logistic_data(300)
        m = StackedEnsemble(library=("logit",), seed=0).fit(X, y)
        np.testing.assert_allclose(m.weights_, [1.0])

    def test_logistic_truth_favors_logit(self):
        X, y = self._logistic_data(2000, seed=1)
        m = StackedEnsemble(library=("logit", "tree"), seed=2).fit(X, y)
        assert m.weights_[m.learner_names_.index("logit")] >= 0.6

    def test_stack_never_worse_than_best_single_learner(self):
        for seed in (0, 1, 2):
            X, y = self._logistic_data(500, seed=seed)
            m = StackedEnsemble(seed=seed).fit(X, y)
            assert m.cv_error_ <= m.cv_errors_single_.min() + 1e-8

    def test_intercept_learner_predicts_base_rate(self):
        X, y = self._logistic_data(400, seed=3)
        m = StackedEnsemble(library=("intercept",), seed=0).fit(X, y)
        np.testing.assert_allclose(m.predict_proba(X[:5]), y.mean(), atol=1e-12)

    def test_unknown_learner_rejected_before_fitting(self):
        X, y = self._logistic_data(100)
        with pytest.raises(ValidationError, match="unknown learner"):
            StackedEnsemble(library=("mystery",), seed=0).fit(X, y)

    def test_weights_live_on_simplex(self):
        X, y = self._logistic_data(600, seed=5)
        m = StackedEnsemble(seed=3).fit(X, y)
        assert np.all(m.weights_ >= 0)
        assert abs(m.weights_.sum() - 1.0) < 1e-9

    def test_predictions_are_probabilities(self):
        X, y = self._logistic_data(500, seed=4)
        pred = StackedEnsemble(seed=1).fit(X, y).predict_proba(X)
        assert pred.min() >= 0 and pred.max() <= 1


class TestStackedGps:
    def test_rows_are_simplex_and_track_shares(self):
        rng = np.random.default_rng(20)
        X = rng.normal(size=(600, 2))
        w = rng.integers(1, 4, 600)
        gps = StackedGps(seed=0).fit(X, w).predict_gps(X)
        assert gps.values.shape == (600, 3)
        np.testing.assert_allclose(gps.values.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(gps.values.mean(axis=0), 1 / 3, atol=0.06)


class TestKMeans1d:
    def test_two_clusters_exact(self):
        model = kmeans_1d([0.0, 0.0, 10.0, 10.0], 2, seed=0)
        np.testing.assert_allclose(model.centers, [0.0, 10.0])
        np.testing.assert_array_equal(model.assignments, [0, 0, 1, 1])
        assert model.inertia == 0.0

    def test_k_one_is_the_mean(self):
        model = kmeans_1d([1.0, 2.0, 6.0], 1, seed=0)
        np.testing.assert_allclose(model.centers, [3.0])

    def test_three_clumps_recovered(self):
        rng = np.random.default_rng(30)
        truth = rng.integers(0, 3, 300)
        pts = truth * 5.0 + rng.normal(0, 0.3, 300)
        model = kmeans_1d(pts, 3, seed=1)
        agree = np.mean(model.assignments == truth)
        assert agree >= 0.99

    def test_translation_equivariance(self):
        rng = np.random.default_rng(31)
        pts = rng.normal(size=80)
        a = kmeans_1d(pts, 3, seed=5)
        b = kmeans_1d(pts + 100.0, 3, seed=5)
        np.testing.assert_allclose(b.centers, a.centers + 100.0, atol=1e-8)
        np.testing.assert_array_equal(a.assignments, b.assignments)

    def test_k_cannot_exceed_distinct_values(self):
        with pytest.raises(ValidationError, match="distinct"):
            kmeans_1d([1.0, 1.0, 2.0], 3)

    def test_deterministic_for_fixed_seed(self):
        rng = np.random.default_rng(32)
        pts = rng.normal(size=50)
        a = kmeans_1d(pts, 4, seed=7)
        b = kmeans_1d(pts, 4, seed=7)
        np.testing.assert_array_equal(a.centers, b.centers)
        np.testing.assert_array_equal(a.assignments, b.assignments)
