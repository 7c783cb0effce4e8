"""Estimation methods: dispatch, weighting, matching, targeted updates,
common-support rules, and the replicate bootstrap."""

import numpy as np
import pytest

from multitreat import (
    BartPriors,
    Dataset,
    EstimationError,
    MethodSpec,
    METHODS,
    ValidationError,
    bart_discard,
    bootstrap,
    estimate_effects,
    ra_estimate,
    rams_estimate,
    tmle_estimate,
    trim_weights,
    vm_estimate,
)
from multitreat.estimators import fit_gps_engine
from multitreat import simulate

from conftest import randomized_config, three_arm_config, toy_dataset

# risk differences implied by the two reference designs, computed from the
# potential-outcome matrix at n = 1e6 (seed 2026); MC error < 0.002
ORACLE_CONFOUNDED = {"ATE12": -0.3201, "ATE13": -0.6230, "ATE23": -0.3029}
ORACLE_RANDOMIZED = {"ATE12": -0.2381, "ATE13": -0.4207, "ATE23": -0.1826}


@pytest.fixture(scope="module")
def confounded_5k():
    return simulate(three_arm_config(5000), seed=42).dataset


@pytest.fixture(scope="module")
def randomized_3k():
    return simulate(randomized_config(3000), seed=42).dataset


class TestMethodSpec:
    def test_method_names_are_closed(self):
        assert len(METHODS) == 10
        with pytest.raises(ValidationError):
            MethodSpec(method="OLS")

    def test_vm_is_att_only(self):
        with pytest.raises(ValidationError, match="ATT effects only"):
            MethodSpec(method="VM", estimand="ATE")

    def test_tmle_is_ate_only(self):
        with pytest.raises(ValidationError, match="ATE effects only"):
            MethodSpec(method="TMLE", estimand="ATT", reference_trt=1)

    def test_att_needs_reference(self):
        with pytest.raises(ValidationError, match="reference"):
            MethodSpec(method="RA", estimand="ATT")

    def test_trim_bounds_checked(self):
        with pytest.raises(ValidationError, match="trim"):
            MethodSpec(method="IPTW-Multinomial", trim_perc=(0.9, 0.1))

    def test_boot_needs_enough_replicates(self):
        with pytest.raises(ValidationError, match="nboots"):
            MethodSpec(method="IPTW-Multinomial", boot=True, nboots=10)

    def test_workers_positive(self):
        with pytest.raises(ValidationError, match="workers"):
            MethodSpec(method="RA", workers=0)


class TestTrimWeights:
    def test_upper_quantile_clamp(self):
        got = trim_weights([1.0, 2.0, 3.0, 100.0], 0.0, 0.75)
        np.testing.assert_allclose(got, [1.0, 2.0, 3.0, 27.25])

    def test_two_sided_clamp(self):
        got = trim_weights([1.0, 2.0, 3.0, 100.0], 0.25, 0.75)
        np.testing.assert_allclose(got, [1.75, 2.0, 3.0, 27.25])

    def test_invalid_bounds(self):
        with pytest.raises(ValidationError):
            trim_weights([1.0, 2.0], 0.5, 0.5)


class TestBartDiscard:
    def test_counterfactual_sd_above_factual_max_discards(self):
        # three units in arm 1: factual sd threshold 0.2; only the middle
        # unit's counterfactual exceeds it (ties keep the unit)
        sds = np.array([[0.10, 0.10, 0.05],
                        [0.20, 0.25, 0.05],
                        [0.15, 0.20, 0.05]])
        eligible, thresholds = bart_discard(sds, np.array([1, 1, 1]),
                                            estimand="ATT", reference=1)
        np.testing.assert_array_equal(eligible, [True, False, True])
        assert thresholds == {1: 0.2}

    def test_att_leaves_comparison_arms_alone(self):
        sds = np.array([[0.1, 0.9, 0.9],
                        [0.1, 0.9, 0.9]])
        eligible, _ = bart_discard(sds, np.array([2, 3]),
                                   estimand="ATT", reference=1)
        np.testing.assert_array_equal(eligible, [True, True])

    def test_ate_applies_rule_within_every_arm(self):
        sds = np.array([[0.10, 0.30, 0.10],
                        [0.10, 0.10, 0.10],
                        [0.10, 0.10, 0.10]])
        eligible, thresholds = bart_discard(sds, np.array([1, 2, 3]))
        np.testing.assert_array_equal(eligible, [False, True, True])
        assert set(thresholds) == {1, 2, 3}

    def test_inflating_a_counterfactual_sd_never_restores_units(self):
        rng = np.random.default_rng(0)
        sds = rng.uniform(0.05, 0.3, (40, 3))
        w = rng.integers(1, 4, 40)
        base, _ = bart_discard(sds, w)
        worse = sds.copy()
        worse[:, 1] *= 1.5
        after, _ = bart_discard(worse, w)
        assert np.all(base | ~after | (w == 2))
        assert after.sum() <= base.sum() + int((w == 2).sum())


class TestRA:
    def test_recovers_confounded_truth(self, confounded_5k):
        table = ra_estimate(confounded_5k, ndpost=500, seed=7)
        for lab, truth in ORACLE_CONFOUNDED.items():
            assert abs(table[lab]["RD"].est - truth) < 0.05

    def test_label_contract(self, randomized_3k):
        ate = ra_estimate(randomized_3k, ndpost=50, seed=1)
        assert ate.labels() == ["ATE12", "ATE13", "ATE23"]
        att = ra_estimate(randomized_3k, estimand="ATT", reference=2,
                          ndpost=50, seed=1)
        assert att.labels() == ["ATT21", "ATT23"]

    def test_risk_differences_telescope(self, randomized_3k):
        table = ra_estimate(randomized_3k, ndpost=100, seed=3)
        got = table["ATE13"]["RD"].est
        want = table["ATE12"]["RD"].est + table["ATE23"]["RD"].est
        assert abs(got - want) < 1e-12

    def test_metadata_and_intervals(self, randomized_3k):
        table = ra_estimate(randomized_3k, ndpost=100, seed=5)
        assert table.metadata["method"] == "RA"
        assert table.metadata["interval_method"] == "posterior"
        est = table["ATE12"]["RD"]
        assert est.lower is not None and est.lower <= est.upper

    def test_same_seed_is_deterministic(self, randomized_3k):
        a = ra_estimate(randomized_3k, ndpost=60, seed=11)
        b = ra_estimate(randomized_3k, ndpost=60, seed=11)
        assert a["ATE12"]["RD"].est == b["ATE12"]["RD"].est


class TestIPTW:
    def test_recovers_confounded_truth(self, confounded_5k):
        res = estimate_effects(confounded_5k,
                               MethodSpec(method="IPTW-Multinomial", seed=7))
        for lab, truth in ORACLE_CONFOUNDED.items():
            assert abs(res.table[lab]["RD"].est - truth) < 0.05

    def test_trim_reports_support_and_weight_panels(self, confounded_5k):
        res = estimate_effects(confounded_5k, MethodSpec(
            method="IPTW-Multinomial", trim_perc=(0.05, 0.95), seed=7))
        assert res.support.rule == "trim"
        assert res.support.thresholds["quantiles"] == [0.05, 0.95]
        lo, hi = res.diagnostics["trim_bounds"]
        assert lo < hi
        assert res.diagnostics["n_clamped"] == res.support.n_discarded > 0
        pre = res.diagnostics["weights"]["pre_trim"]
        post = res.diagnostics["weights"]["post_trim"]
        assert set(pre) == {1, 2, 3}
        for a in (1, 2, 3):
            assert post[a]["max"] <= hi + 1e-12
            assert pre[a]["max"] >= post[a]["max"]

    def test_row_permutation_invariance(self, confounded_5k):
        ds = confounded_5k
        perm = np.random.default_rng(0).permutation(ds.n)
        shuffled = Dataset(x=ds.x[perm], w=ds.w[perm], y=ds.y[perm],
                           covariate_names=ds.covariate_names)
        spec = MethodSpec(method="IPTW-Multinomial", trim_perc=(0.01, 0.99), seed=3)
        a = estimate_effects(ds, spec).table
        b = estimate_effects(shuffled, spec).table
        for lab in a.labels():
            assert abs(a[lab]["RD"].est - b[lab]["RD"].est) < 1e-8

    def test_bootstrap_attaches_intervals_and_keeps_point(self):
        ds = simulate(three_arm_config(800), seed=5).dataset
        point = estimate_effects(ds, MethodSpec(method="IPTW-Multinomial",
                                                seed=9)).table
        res = estimate_effects(ds, MethodSpec(
            method="IPTW-Multinomial", boot=True, nboots=60, seed=9))
        got = res.table["ATE12"]["RD"]
        assert got.est == point["ATE12"]["RD"].est
        assert got.se is not None and got.se > 0
        assert got.lower < got.upper
        assert res.diagnostics["n_boot_failed"] == 0
        assert res.table.metadata["interval_method"] == "bootstrap"

    def test_bootstrap_worker_count_does_not_change_results(self):
        ds = simulate(three_arm_config(500), seed=6).dataset
        tables = []
        for workers in (1, 3):
            res = estimate_effects(ds, MethodSpec(
                method="IPTW-Multinomial", boot=True, nboots=50, seed=4,
                workers=workers))
            tables.append(res.table.to_json_dict())
        assert tables[0] == tables[1]

    def test_gbm_engine_reports_tree_count(self):
        ds = simulate(three_arm_config(600), seed=8).dataset
        res = estimate_effects(ds, MethodSpec(
            method="IPTW-GBM", gbm_n_trees=200, gbm_check_every=100, seed=2))
        assert res.diagnostics["gps"]["n_trees_used"] in (100, 200)
        assert set(res.table.labels()) == {"ATE12", "ATE13", "ATE23"}

    def test_unknown_engine_rejected(self, small_dataset):
        with pytest.raises(ValidationError, match="engine"):
            fit_gps_engine(small_dataset.x, small_dataset.w, "oracle", (0,))


class TestRAMS:
    def test_recovers_confounded_truth(self, confounded_5k):
        res = rams_estimate(confounded_5k, seed=7)
        for lab, truth in ORACLE_CONFOUNDED.items():
            assert abs(res.table[lab]["RD"].est - truth) < 0.05
        assert res.diagnostics["lambda"] > 0
        assert res.diagnostics["edf"] >= 3

    def test_rare_outcome_stays_calibrated(self):
        # same design with intercepts pushed down to ~2.6% prevalence;
        # truth from the potential-outcome matrix at n = 1e6 (seed 2027)
        ds = simulate(three_arm_config(5000, tau=[-4.2, -3.8, -3.4]),
                      seed=2027).dataset
        res = rams_estimate(ds, seed=3)
        assert abs(res.table["ATE12"]["RD"].est - (-0.0086)) < 0.02

    def test_att_labels(self, randomized_3k):
        res = rams_estimate(randomized_3k, estimand="ATT", reference=3, seed=5)
        assert res.table.labels() == ["ATT31", "ATT32"]


class TestBART:
    PRIORS = BartPriors(n_trees=20)

    def test_recovers_randomized_truth(self, randomized_3k):
        res = estimate_effects(randomized_3k, MethodSpec(
            method="BART", ndpost=100, burn=80, bart_priors=self.PRIORS,
            seed=7))
        assert abs(res.table["ATE12"]["RD"].est
                   - ORACLE_RANDOMIZED["ATE12"]) < 0.07
        assert res.support.rule == "bart-discard"
        assert res.support.n_discarded == 0
        assert res.support.eligible.all()

    def test_risk_differences_telescope(self, randomized_3k):
        res = estimate_effects(randomized_3k, MethodSpec(
            method="BART", ndpost=60, burn=50, bart_priors=self.PRIORS,
            seed=8))
        tab = res.table
        assert abs(tab["ATE13"]["RD"].est - tab["ATE12"]["RD"].est
                   - tab["ATE23"]["RD"].est) < 1e-12

    def test_discard_rule_reports_thresholds(self):
        cfg = three_arm_config(600, psi=3.0)
        ds = simulate(cfg, seed=11).dataset
        res = estimate_effects(ds, MethodSpec(
            method="BART", estimand="ATT", reference_trt=1, discard=True,
            ndpost=80, burn=60, bart_priors=self.PRIORS, seed=9))
        assert res.support.n_discarded >= 0
        assert 1 in res.support.thresholds
        assert res.support.eligible[ds.w != 1].all()
        assert res.diagnostics["n_discard"] == res.support.n_discarded


class TestVM:
    def test_matched_att_on_randomized_data(self):
        ds = simulate(randomized_config(3000), seed=13).dataset
        res = vm_estimate(ds, reference=1, seed=21)
        assert res.table.labels() == ["ATT12", "ATT13"]
        assert abs(res.table["ATT12"]["RD"].est
                   - ORACLE_RANDOMIZED["ATE12"]) < 0.07
        assert res.support.rule == "rectangular"
        match = res.diagnostics["match"]
        assert match.n_matched == res.diagnostics["n_matched"] > 100
        assert match.triplets.shape == (match.n_matched, 3)

    def test_triplets_point_at_right_arms(self):
        ds = simulate(three_arm_config(900), seed=14).dataset
        res = vm_estimate(ds, reference=2, seed=3)
        trip = res.diagnostics["match"].triplets
        we = ds.w[res.support.eligible]
        np.testing.assert_array_equal(we[trip[:, 0]], 2)
        assert set(np.unique(we[trip[:, 1]])) == {1}
        assert set(np.unique(we[trip[:, 2]])) == {3}

    def test_needs_exactly_three_arms(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(100, 2))
        w = rng.integers(1, 3, 100)
        y = rng.integers(0, 2, 100)
        ds = Dataset(x=x, w=w, y=y, covariate_names=["x1", "x2"])
        with pytest.raises(ValidationError, match="3 treatments"):
            vm_estimate(ds, reference=1, seed=0)

    def test_same_seed_is_deterministic(self):
        ds = simulate(three_arm_config(700), seed=15).dataset
        a = vm_estimate(ds, reference=1, seed=2)
        b = vm_estimate(ds, reference=1, seed=2)
        assert a.table.to_json_dict() == b.table.to_json_dict()


class TestTMLE:
    def test_recovers_randomized_truth(self, randomized_3k):
        res = tmle_estimate(randomized_3k, library=("logit",), seed=4)
        for lab, truth in ORACLE_RANDOMIZED.items():
            assert abs(res.table[lab]["RD"].est - truth) < 0.06

    def test_constant_covariate_needs_no_fluctuation(self):
        rng = np.random.default_rng(5)
        n = 1200
        x = np.ones((n, 1))
        w = rng.integers(1, 4, n)
        y = (rng.random(n) < np.where(w == 1, 0.3, 0.6)).astype(int)
        ds = Dataset(x=x, w=w, y=y, covariate_names=["x1"])
        res = tmle_estimate(ds, library=("intercept",),
                            q_library=("logit",), seed=6)
        for eps in res.diagnostics["epsilon"].values():
            assert abs(eps) < 1e-6
        raw = y[w == 1].mean() - y[w == 2].mean()
        assert abs(res.table["ATE12"]["RD"].est - raw) < 1e-6

    def test_risk_differences_telescope(self, randomized_3k):
        res = tmle_estimate(randomized_3k, library=("logit",), seed=8)
        tab = res.table
        assert abs(tab["ATE13"]["RD"].est - tab["ATE12"]["RD"].est
                   - tab["ATE23"]["RD"].est) < 1e-12


class TestDispatchAndResult:
    def test_result_unpacks(self, small_dataset):
        res = estimate_effects(small_dataset,
                               MethodSpec(method="RA", ndpost=30, seed=1))
        table, support, diagnostics = res
        assert table.labels() == ["ATE12", "ATE13", "ATE23"]
        assert support is None
        assert diagnostics == {}

    def test_seed_list_equals_tuple(self, small_dataset):
        a = estimate_effects(small_dataset,
                             MethodSpec(method="RA", ndpost=30, seed=(5, 2)))
        b = estimate_effects(small_dataset,
                             MethodSpec(method="RA", ndpost=30, seed=(5, 2)))
        assert a.table.to_json_dict() == b.table.to_json_dict()

    def test_every_method_name_dispatches(self, small_dataset):
        # RA covers the posterior path; one engine each for the others
        fast = [MethodSpec(method="RA", ndpost=20, seed=0),
                MethodSpec(method="IPTW-Multinomial", seed=0),
                MethodSpec(method="RAMS-Multinomial", seed=0)]
        for spec in fast:
            res = estimate_effects(small_dataset, spec)
            assert res.table.labels()


class TestBootstrap:
    @staticmethod
    def _mean_fn(ds, rep_seed):
        return {("m", "RD"): float(ds.y.mean())}

    def test_constant_replicates_have_zero_spread(self, small_dataset):
        fn = lambda ds, s: {("c", "RD"): 1.0}
        summaries, n_failed, _ = bootstrap(fn, small_dataset, 50, seed=1)
        s = summaries[("c", "RD")]
        assert (s.est, s.se, s.lower, s.upper) == (1.0, 0.0, 1.0, 1.0)
        assert n_failed == 0

    def test_reproducible_under_seed(self, small_dataset):
        a, _, _ = bootstrap(self._mean_fn, small_dataset, 60, seed=9)
        b, _, _ = bootstrap(self._mean_fn, small_dataset, 60, seed=9)
        assert tuple(a[("m", "RD")]) == tuple(b[("m", "RD")])

    def test_se_tracks_analytic_rate(self):
        rng = np.random.default_rng(17)
        n = 500
        y = rng.integers(0, 2, n)
        ds = Dataset(x=rng.normal(size=(n, 1)), w=np.tile([1, 2], n // 2),
                     y=y, covariate_names=["x1"])
        summaries, _, _ = bootstrap(self._mean_fn, ds, 200, seed=3)
        p = y.mean()
        analytic = np.sqrt(p * (1 - p) / n)
        assert abs(summaries[("m", "RD")].se - analytic) < 0.15 * analytic

    def test_sparse_failures_tolerated_dense_failures_raise(self, small_dataset):
        def flaky(ds, rep_seed):
            if rep_seed[-1] < 3:
                raise EstimationError("unlucky resample")
            return {("m", "RD"): 0.5}

        summaries, n_failed, _ = bootstrap(flaky, small_dataset, 50, seed=2)
        assert n_failed == 3
        assert summaries[("m", "RD")].est == 0.5

        def broken(ds, rep_seed):
            if rep_seed[-1] < 10:
                raise EstimationError("unlucky resample")
            return {("m", "RD"): 0.5}

        with pytest.raises(EstimationError, match="replicates failed"):
            bootstrap(broken, small_dataset, 50, seed=2)
