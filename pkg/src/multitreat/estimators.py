"""Causal effect estimators for multiple treatments with binary outcomes.

Ten methods behind one dispatcher: outcome regression with posterior draws
(RA), inverse-probability weighting with three GPS engines, probit BART with
an optional posterior-sd discard rule, tensor-spline outcome modeling on the
GPS (RAMS variants), vector matching (ATT, three arms), and targeted maximum
likelihood (ATE).  Interval methods: posterior draws where the model supplies
them, otherwise a nonparametric bootstrap that re-runs the whole pipeline
(GPS fits included) inside every replicate.

Seeds are tuples of integers; every stochastic sub-step derives its own
stream by appending a fixed tag, and bootstrap replicate r uses
(master seed, r) regardless of the data, which makes estimates invariant to
row permutation and reproducible across worker counts.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from .bart import BartPriors, fit_probit_bart
from .data import (SCALES, Dataset, EffectEstimate, EffectTable,
                   contrast_from_draws, contrast_label, five_number_summary,
                   pairwise_contrasts, summarize_replicates)
from .learners import (BayesLogit, BoostedTrees, MultinomialLogit,
                       StackedEnsemble, StackedGps, kmeans_1d)
from .splines import build_basis, fit_rams, predict_rams
from .validation import (EstimationError, ValidationError, check_choice,
                         ensure_seed_tuple, rng_from)

METHODS = ("RA", "IPTW-Multinomial", "IPTW-GBM", "IPTW-SL", "BART",
           "RAMS-Multinomial", "RAMS-GBM", "RAMS-SL", "VM", "TMLE")
_GPS_FLOOR = 1e-4


@dataclass
class MethodSpec:
    """Everything needed to run one estimation method.

    ``gbm_n_trees``/``gbm_check_every`` tune the boosted GPS engine and
    ``bart_priors``/``burn`` the BART sampler; they keep their library
    defaults when unset.
    """

    method: str
    estimand: str = "ATE"
    reference_trt: int | None = None
    ndpost: int = 1000
    discard: bool = False
    trim_perc: tuple | None = None
    boot: bool = False
    nboots: int = 200
    n_cluster: int = 5
    caliper: float = 0.25
    library: tuple = ("logit", "ridge-logit", "tree")
    seed: int | tuple | None = None
    burn: int = 100
    bart_priors: BartPriors | None = None
    gbm_n_trees: int = 3000
    gbm_check_every: int = 100
    workers: int = 1

    def __post_init__(self):
        check_choice(self.method, set(METHODS), "method")
        check_choice(self.estimand, {"ATE", "ATT"}, "estimand")
        if self.method == "VM" and self.estimand != "ATT":
            raise ValidationError("VM estimates ATT effects only")
        if self.method == "TMLE" and self.estimand != "ATE":
            raise ValidationError("TMLE estimates ATE effects only")
        if self.estimand == "ATT" and self.reference_trt is None:
            raise ValidationError("ATT requires reference_trt")
        if self.trim_perc is not None:
            lo, hi = self.trim_perc
            if not 0 <= lo < hi <= 1:
                raise ValidationError("trim_perc must satisfy 0 <= lo < hi <= 1")
        if self.boot and self.nboots < 50:
            raise ValidationError("nboots must be >= 50")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")


@dataclass
class CommonSupportReport:
    rule: str                      # trim | rectangular | bart-discard
    n_discarded: int
    eligible: np.ndarray           # per-unit flags (True = kept/untouched)
    thresholds: dict

    def to_json_dict(self):
        return {"rule": self.rule, "n_discarded": int(self.n_discarded),
                "eligible": [bool(v) for v in self.eligible],
                "thresholds": _plain(self.thresholds)}


@dataclass
class MatchResult:
    triplets: np.ndarray           # columns: reference id, match per other arm
    n_matched: int
    caliper: float


@dataclass
class EstimationResult:
    table: EffectTable
    support: CommonSupportReport | None
    diagnostics: dict

    def __iter__(self):
        return iter((self.table, self.support, self.diagnostics))


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_plain(v) for v in np.asarray(obj).tolist()] \
            if isinstance(obj, np.ndarray) else [_plain(v) for v in obj]
    if isinstance(obj, (np.integer, np.bool_)):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


_as_seed_tuple = ensure_seed_tuple


def _seed_int(seed_tuple):
    return int(rng_from(seed_tuple).integers(2 ** 31 - 1))


def _dummies(w, n_trt):
    out = np.zeros((len(w), n_trt - 1))
    for a in range(1, n_trt):
        out[:, a - 1] = w == a
    return out


def _cf_dummies(arm, n_rows, n_trt):
    block = np.zeros((n_rows, n_trt - 1))
    if arm < n_trt:
        block[:, arm - 1] = 1.0
    return block


# ---------------------------------------------------------------------------
# dispatch


def estimate_effects(dataset: Dataset, spec: MethodSpec) -> EstimationResult:
    """Run one estimation method; deterministic given ``spec.seed``."""
    seed = _as_seed_tuple(spec.seed)
    if spec.method == "RA":
        table = ra_estimate(dataset, spec.estimand, spec.reference_trt,
                            spec.ndpost, seed)
        return EstimationResult(table, None, {})
    if spec.method.startswith("IPTW"):
        engine = {"IPTW-Multinomial": "multinomial", "IPTW-GBM": "gbm",
                  "IPTW-SL": "stacked"}[spec.method]
        return iptw_estimate(dataset, engine, spec.estimand, spec.reference_trt,
                             spec.trim_perc, spec.boot, spec.nboots, seed, spec,
                             workers=spec.workers)
    if spec.method == "BART":
        table, support = bart_estimate(dataset, spec.estimand,
                                       spec.reference_trt, spec.discard,
                                       spec.ndpost, spec.bart_priors, seed,
                                       burn=spec.burn)
        return EstimationResult(table, support,
                                {"n_discard": support.n_discarded})
    if spec.method.startswith("RAMS"):
        engine = {"RAMS-Multinomial": "multinomial", "RAMS-GBM": "gbm",
                  "RAMS-SL": "stacked"}[spec.method]
        return rams_estimate(dataset, engine, spec.estimand, spec.reference_trt,
                             spec.boot, spec.nboots, seed, spec,
                             workers=spec.workers)
    if spec.method == "VM":
        return vm_estimate(dataset, spec.reference_trt, spec.n_cluster,
                           spec.caliper, spec.boot, spec.nboots, seed,
                           workers=spec.workers)
    return tmle_estimate(dataset, spec.library, seed, boot=spec.boot,
                         nboots=spec.nboots, workers=spec.workers)


# ---------------------------------------------------------------------------
# outcome-regression methods with posterior draws


def _table_from_arm_draws(arm_draws, estimand, n_trt, reference, metadata):
    entries, draws = {}, {}
    for a, b in pairwise_contrasts(estimand, n_trt, reference):
        label = contrast_label(estimand, a, b)
        entries[label] = contrast_from_draws(arm_draws[a], arm_draws[b])
        draws[label] = (arm_draws[a], arm_draws[b])
    return EffectTable(entries=entries, metadata=metadata, draws=draws)


def ra_estimate(dataset: Dataset, estimand="ATE", reference=None,
                ndpost=1000, seed=None) -> EffectTable:
    """Bayesian logistic outcome regression with counterfactual imputation.

    For each posterior coefficient draw, every target unit's potential
    outcome under every arm is imputed as a Bernoulli draw and averaged
    within arm; contrasts summarize the per-draw arm means.
    """
    seed = _as_seed_tuple(seed)
    t = dataset.n_trt
    contrast_ref = _check_target(estimand, reference, t)
    design = np.column_stack([_dummies(dataset.w, t), dataset.x])
    model = BayesLogit(ndpost=ndpost, seed=seed + (1,)).fit(design, dataset.y)

    target = np.ones(dataset.n, bool) if estimand == "ATE" \
        else dataset.w == reference
    if not np.any(target):
        raise EstimationError(f"reference arm {reference} has no units")
    x_t = dataset.x[target]
    rng = rng_from(seed + (2,))
    arm_draws = {}
    for arm in range(1, t + 1):
        cf = np.column_stack([_cf_dummies(arm, x_t.shape[0], t), x_t])
        p = model.predict_proba_draws(cf)
        arm_draws[arm] = (rng.random(p.shape) < p).mean(axis=1)
    meta = {"method": "RA", "estimand": estimand, "reference": contrast_ref,
            "ndpost": ndpost, "n": dataset.n, "interval_method": "posterior"}
    return _table_from_arm_draws(arm_draws, estimand, t, contrast_ref, meta)


def _check_target(estimand, reference, n_trt):
    if estimand == "ATT":
        if reference is None or not 1 <= reference <= n_trt:
            raise ValidationError(f"ATT needs a reference arm in 1..{n_trt}")
        return reference
    return None


def bart_discard(sds, w, estimand="ATE", reference=None):
    """Eligibility under the posterior-sd support rule.

    ``sds[i, a-1]`` is the posterior sd of unit i's predicted probability
    under arm a.  A unit in arm g is discarded iff any counterfactual sd
    strictly exceeds the largest factual sd within arm g; equality keeps the
    unit.  For ATT the rule applies to reference-arm units only.
    """
    sds = np.asarray(sds, dtype=float)
    w = np.asarray(w, dtype=np.int64).ravel()
    n, t = sds.shape
    eligible = np.ones(n, dtype=bool)
    arms = [reference] if estimand == "ATT" else range(1, t + 1)
    thresholds = {}
    for g in arms:
        mask = w == g
        if not np.any(mask):
            continue
        thr = float(sds[mask, g - 1].max())
        thresholds[g] = thr
        others = [a for a in range(1, t + 1) if a != g]
        bad = (sds[np.ix_(mask, [a - 1 for a in others])] > thr).any(axis=1)
        eligible[np.flatnonzero(mask)[bad]] = False
    return eligible, thresholds


def bart_estimate(dataset: Dataset, estimand="ATE", reference=None,
                  discard=False, ndpost=1000, priors=None, seed=None,
                  burn=100):
    """Probit BART on (X, treatment dummies) with counterfactual imputation."""
    seed = _as_seed_tuple(seed)
    t = dataset.n_trt
    contrast_ref = _check_target(estimand, reference, t)
    design = np.column_stack([dataset.x, _dummies(dataset.w, t)])
    fit = fit_probit_bart(design, dataset.y, ndpost=ndpost, burn=burn,
                          priors=priors, seed=rng_from(seed + (1,)))

    target = np.ones(dataset.n, bool) if estimand == "ATE" \
        else dataset.w == reference
    if not np.any(target):
        raise EstimationError(f"reference arm {reference} has no units")
    x_t = dataset.x[target]
    cf_draws = {}
    for arm in range(1, t + 1):
        cf = np.column_stack([x_t, _cf_dummies(arm, x_t.shape[0], t)])
        cf_draws[arm] = fit.predict(cf).draws

    if discard:
        sds = np.column_stack([cf_draws[a].std(axis=0, ddof=1)
                               for a in range(1, t + 1)])
        eligible_t, thresholds = bart_discard(sds, dataset.w[target],
                                              estimand, reference)
    else:
        eligible_t = np.ones(x_t.shape[0], dtype=bool)
        thresholds = {}
    eligible = np.ones(dataset.n, dtype=bool)
    eligible[np.flatnonzero(target)[~eligible_t]] = False
    support = CommonSupportReport(rule="bart-discard",
                                  n_discarded=int((~eligible_t).sum()),
                                  eligible=eligible, thresholds=thresholds)
    if not np.any(eligible_t):
        raise EstimationError("every target unit was discarded")
    if estimand == "ATE":
        arm_counts = [np.any(eligible_t & (dataset.w[target] == a))
                      for a in range(1, t + 1)]
        if not all(arm_counts):
            raise EstimationError("an arm lost all units to the discard rule")

    rng = rng_from(seed + (2,))
    arm_draws = {}
    for arm in range(1, t + 1):
        p = cf_draws[arm][:, eligible_t]
        arm_draws[arm] = (rng.random(p.shape) < p).mean(axis=1)
    meta = {"method": "BART", "estimand": estimand, "reference": contrast_ref,
            "ndpost": ndpost, "n": dataset.n, "n_discard": support.n_discarded,
            "interval_method": "posterior"}
    table = _table_from_arm_draws(arm_draws, estimand, t, contrast_ref, meta)
    return table, support


# ---------------------------------------------------------------------------
# GPS engines and weighting

_IPTW_NAMES = {"multinomial": "IPTW-Multinomial", "gbm": "IPTW-GBM",
               "stacked": "IPTW-SL"}
_RAMS_NAMES = {"multinomial": "RAMS-Multinomial", "gbm": "RAMS-GBM",
               "stacked": "RAMS-SL"}


def _engine_knobs(spec):
    if spec is None:
        return ("logit", "ridge-logit", "tree"), 3000, 100
    return spec.library, spec.gbm_n_trees, spec.gbm_check_every


def fit_gps_engine(x, w, engine, seed, estimand="ATE", reference=None,
                   library=("logit", "ridge-logit", "tree"),
                   gbm_n_trees=3000, gbm_check_every=100):
    """Fit one of the three GPS engines; returns (gps values, diagnostics)."""
    if engine == "multinomial":
        model = MultinomialLogit().fit(x, w)
        return model.predict_gps(x).values, {"converged": model.converged_}
    if engine == "gbm":
        model = BoostedTrees(estimand=estimand, reference=reference,
                             n_trees_max=gbm_n_trees,
                             check_every=gbm_check_every,
                             seed=_seed_int(seed)).fit(x, w)
        return model.predict_gps(x).values, {
            "n_trees_used": model.n_trees_used_,
            "balance_trace": model.balance_trace_}
    if engine == "stacked":
        model = StackedGps(library=library, seed=_seed_int(seed)).fit(x, w)
        return model.predict_gps(x).values, {"components": len(model.components_)}
    raise ValidationError(f"unknown GPS engine {engine!r}")


def trim_weights(weights, lo_pct, hi_pct):
    """Clamp weights to their [lo_pct, hi_pct] quantile range."""
    weights = np.asarray(weights, dtype=float)
    if not 0 <= lo_pct < hi_pct <= 1:
        raise ValidationError("need 0 <= lo < hi <= 1")
    lo, hi = np.quantile(weights, [lo_pct, hi_pct])
    return np.clip(weights, lo, hi)


def _iptw_weights(gps, w, estimand, reference):
    own = gps[np.arange(len(w)), w - 1]
    if estimand == "ATE":
        return 1.0 / own
    return np.where(w == reference, 1.0, gps[:, reference - 1] / own)


def _weighted_arm_means(y, w, weights, n_trt):
    means = {}
    for a in range(1, n_trt + 1):
        mask = w == a
        total = weights[mask].sum()
        if not np.any(mask) or total <= 0:
            raise EstimationError(f"arm {a} has zero total weight")
        means[a] = float(np.sum(weights[mask] * y[mask]) / total)
    return means


def _point_contrasts(arm_means, estimand, n_trt, reference):
    out = {}
    for a, b in pairwise_contrasts(estimand, n_trt, reference):
        label = contrast_label(estimand, a, b)
        m1, m2 = arm_means[a], arm_means[b]
        out[(label, "RD")] = m1 - m2
        if not (0 < m1 < 1 and 0 < m2 < 1):
            raise EstimationError(
                f"degenerate arm mean for {label}; RR and OR undefined")
        out[(label, "RR")] = m1 / m2
        out[(label, "OR")] = (m1 / (1 - m1)) / (m2 / (1 - m2))
    return out


def _table_from_points(points, estimand, n_trt, reference, metadata,
                       summaries=None):
    entries = {}
    for a, b in pairwise_contrasts(estimand, n_trt, reference):
        label = contrast_label(estimand, a, b)
        entries[label] = {}
        for scale in SCALES:
            est = points[(label, scale)]
            if summaries is not None:
                s = summaries[(label, scale)]
                entries[label][scale] = EffectEstimate(
                    scale=scale, est=est, se=s.se, lower=s.lower, upper=s.upper)
            else:
                entries[label][scale] = EffectEstimate(scale=scale, est=est)
    return EffectTable(entries=entries, metadata=metadata)


def bootstrap(replicate_fn, dataset: Dataset, nboots, seed, workers=1):
    """Nonparametric bootstrap over a full-pipeline replicate closure.

    ``replicate_fn(ds, rep_seed) -> {(label, scale): value}``; replicate r
    resamples rows with the stream (seed, r) and passes that same tuple on.
    Failing replicates are dropped and counted; more than 10% failures is an
    error.  Results are reduced in replicate order, so the output does not
    depend on ``workers``.
    """
    seed = _as_seed_tuple(seed)
    n = dataset.n

    def one(r):
        rng = rng_from(seed + (r,))
        idx = rng.integers(0, n, n)
        ds_r = Dataset(x=dataset.x[idx], w=dataset.w[idx], y=dataset.y[idx],
                       covariate_names=dataset.covariate_names)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                return replicate_fn(ds_r, seed + (r,))
        except (ValidationError, EstimationError, np.linalg.LinAlgError):
            return None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(nboots)))
    else:
        results = [one(r) for r in range(nboots)]

    kept = [r for r in results if r is not None]
    n_failed = nboots - len(kept)
    if n_failed > 0.1 * nboots:
        raise EstimationError(
            f"{n_failed} of {nboots} bootstrap replicates failed")
    keys = kept[0].keys()
    summaries = {k: summarize_replicates([r[k] for r in kept]) for k in keys}
    return summaries, n_failed, results


def iptw_estimate(dataset: Dataset, gps_engine="multinomial", estimand="ATE",
                  reference=None, trim_perc=None, boot=False, nboots=200,
                  seed=None, spec: MethodSpec | None = None,
                  workers=1) -> EstimationResult:
    """Hajek-weighted group means under 1/GPS (ATE) or GPS-ratio (ATT) weights."""
    seed = _as_seed_tuple(seed)
    library, gbm_n_trees, gbm_check_every = _engine_knobs(spec)
    t = dataset.n_trt
    contrast_ref = _check_target(estimand, reference, t)
    diagnostics = {}
    method_name = _IPTW_NAMES[gps_engine]

    def arm_means_of(ds, rep_seed, collect=False):
        gps, gps_diag = fit_gps_engine(
            ds.x, ds.w, gps_engine, rep_seed + (1,), estimand, reference,
            library, gbm_n_trees, gbm_check_every)
        n_floored = int((gps < _GPS_FLOOR).sum())
        gps = np.clip(gps, _GPS_FLOOR, None)
        weights = _iptw_weights(gps, ds.w, estimand, reference)
        pre = weights.copy()
        if trim_perc is not None:
            weights = trim_weights(weights, *trim_perc)
        if collect:
            diagnostics["gps"] = gps_diag
            diagnostics["n_gps_floored"] = n_floored
            diagnostics["weights"] = {
                "pre_trim": {a: five_number_summary(pre[ds.w == a])
                             for a in range(1, t + 1)},
                "post_trim": {a: five_number_summary(weights[ds.w == a])
                              for a in range(1, t + 1)}}
            if trim_perc is not None:
                lo, hi = np.quantile(pre, list(trim_perc))
                diagnostics["trim_bounds"] = [float(lo), float(hi)]
                diagnostics["n_clamped"] = int(((pre < lo) | (pre > hi)).sum())
        return _weighted_arm_means(ds.y, ds.w, weights, t)

    means = arm_means_of(dataset, seed, collect=True)
    points = _point_contrasts(means, estimand, t, contrast_ref)
    summaries = None
    if boot:
        def rep(ds, rep_seed):
            return _point_contrasts(arm_means_of(ds, rep_seed), estimand, t,
                                    contrast_ref)
        summaries, n_failed, _ = bootstrap(rep, dataset, nboots, seed, workers)
        diagnostics["n_boot_failed"] = n_failed

    support = None
    if trim_perc is not None:
        n_clamped = diagnostics.get("n_clamped", 0)
        support = CommonSupportReport(
            rule="trim", n_discarded=n_clamped,
            eligible=np.ones(dataset.n, dtype=bool),
            thresholds={"quantiles": list(trim_perc),
                        "bounds": diagnostics.get("trim_bounds")})
    meta = {"method": method_name, "estimand": estimand,
            "reference": contrast_ref, "n": dataset.n,
            "interval_method": "bootstrap" if boot else None}
    table = _table_from_points(points, estimand, t, contrast_ref, meta,
                               summaries)
    return EstimationResult(table, support, diagnostics)


def rams_estimate(dataset: Dataset, gps_engine="multinomial", estimand="ATE",
                  reference=None, boot=False, nboots=200, seed=None,
                  spec: MethodSpec | None = None, n_basis=5,
                  workers=1) -> EstimationResult:
    """Treatment-additive tensor-spline outcome model on logit-GPS."""
    seed = _as_seed_tuple(seed)
    library, gbm_n_trees, gbm_check_every = _engine_knobs(spec)
    t = dataset.n_trt
    contrast_ref = _check_target(estimand, reference, t)
    diagnostics = {}
    method_name = _RAMS_NAMES[gps_engine]

    def arm_means_of(ds, rep_seed, collect=False):
        gps, gps_diag = fit_gps_engine(
            ds.x, ds.w, gps_engine, rep_seed + (1,), estimand, reference,
            library, gbm_n_trees, gbm_check_every)
        lg = logit(np.clip(gps[:, : t - 1], 1e-12, 1 - 1e-12))
        basis = build_basis(lg, K=n_basis)
        fit = fit_rams(ds.y, ds.w, basis)
        target = np.ones(ds.n, bool) if estimand == "ATE" else ds.w == reference
        if not np.any(target):
            raise EstimationError(f"reference arm {reference} has no units")
        means, clamped = {}, 0
        for arm in range(1, t + 1):
            p, n_clamp = predict_rams(fit, arm, lg[target])
            means[arm] = float(p.mean())
            clamped += n_clamp
        if collect:
            diagnostics["gps"] = gps_diag
            diagnostics["lambda"] = fit.lam
            diagnostics["edf"] = fit.edf
            diagnostics["n_clamped_predictions"] = clamped
        return means

    means = arm_means_of(dataset, seed, collect=True)
    points = _point_contrasts(means, estimand, t, contrast_ref)
    summaries = None
    if boot:
        def rep(ds, rep_seed):
            return _point_contrasts(arm_means_of(ds, rep_seed), estimand, t,
                                    contrast_ref)
        summaries, n_failed, _ = bootstrap(rep, dataset, nboots, seed, workers)
        diagnostics["n_boot_failed"] = n_failed
    meta = {"method": method_name, "estimand": estimand,
            "reference": contrast_ref, "n": dataset.n,
            "interval_method": "bootstrap" if boot else None}
    table = _table_from_points(points, estimand, t, contrast_ref, meta,
                               summaries)
    return EstimationResult(table, None, diagnostics)


# ---------------------------------------------------------------------------
# vector matching (ATT, three arms)


def _rectangular_support(gps, w, n_trt):
    lower = np.empty(n_trt)
    upper = np.empty(n_trt)
    for col in range(n_trt):
        per_arm_min = [gps[w == a, col].min() for a in range(1, n_trt + 1)]
        per_arm_max = [gps[w == a, col].max() for a in range(1, n_trt + 1)]
        lower[col] = max(per_arm_min)
        upper[col] = min(per_arm_max)
    eligible = np.all((gps >= lower) & (gps <= upper), axis=1)
    return eligible, lower, upper


def _match_within_strata(x_match, strata, ref_mask, comp_mask, cal_width, rng):
    """1:1 nearest neighbor with replacement; random tie-breaks."""
    matches = {}
    for i in np.flatnonzero(ref_mask):
        pool = np.flatnonzero(comp_mask & (strata == strata[i]))
        if pool.size == 0:
            continue
        dist = np.abs(x_match[pool] - x_match[i])
        best = dist.min()
        if best > cal_width:
            continue
        ties = pool[dist == best]
        matches[i] = int(ties[rng.integers(ties.size)])
    return matches


def vm_estimate(dataset: Dataset, reference, n_cluster=5, caliper=0.25,
                boot=False, nboots=200, seed=None, workers=1) -> EstimationResult:
    """Vector matching on the GPS for the ATT with three treatments.

    Pipeline per fit: multinomial-logit GPS on all units; rectangular
    common-support eligibility per GPS column; GPS refit on eligible units;
    per comparison arm, reference units are matched 1:1 with replacement on
    the logit of the reference-arm GPS within k-means strata of the excluded
    arm's logit GPS, under ``caliper`` times the sd of the matching variable;
    reference units matched in both comparisons form triplets whose observed
    outcomes are contrasted.
    """
    seed = _as_seed_tuple(seed)
    t = dataset.n_trt
    if t != 3:
        raise ValidationError("vector matching supports exactly 3 treatments")
    _check_target("ATT", reference, t)
    diagnostics = {}

    def pipeline(ds, rep_seed, collect=False):
        gps0 = MultinomialLogit().fit(ds.x, ds.w).predict_gps(ds.x).values
        eligible, lower, upper = _rectangular_support(gps0, ds.w, t)
        if not np.any(eligible):
            raise EstimationError("no units inside the rectangular support")
        for a in range(1, t + 1):
            if not np.any(eligible & (ds.w == a)):
                raise EstimationError(f"arm {a} lost all units to support")
        xe, we, ye = ds.x[eligible], ds.w[eligible], ds.y[eligible]
        gps = MultinomialLogit().fit(xe, we).predict_gps(xe).values
        lg = logit(np.clip(gps, 1e-12, 1 - 1e-12))
        clusters = {}
        for col in range(1, t + 1):
            km = kmeans_1d(lg[:, col - 1], min(n_cluster, len(np.unique(lg[:, col - 1]))),
                           seed=rep_seed + (10 + col,))
            clusters[col] = km.assignments
        others = [a for a in range(1, t + 1) if a != reference]
        rng = rng_from(rep_seed + (20,))
        x_match = lg[:, reference - 1]
        ref_mask = we == reference
        matched_per_comp = {}
        for comp in others:
            third = next(a for a in range(1, t + 1)
                         if a not in (reference, comp))
            pool_mask = (we == reference) | (we == comp)
            sd = float(np.std(x_match[pool_mask], ddof=1))
            cal_width = caliper * sd
            matched_per_comp[comp] = _match_within_strata(
                x_match, clusters[third], ref_mask, we == comp, cal_width, rng)
        kept = sorted(set.intersection(
            *[set(m.keys()) for m in matched_per_comp.values()]))
        n_matched = len(kept)
        if n_matched == 0:
            raise EstimationError("no reference units matched in every comparison")
        cols = [np.array(kept)]
        for comp in others:
            cols.append(np.array([matched_per_comp[comp][i] for i in kept]))
        triplets = np.column_stack(cols)
        arm_order = [reference] + others
        means = {arm: float(ye[triplets[:, j]].mean())
                 for j, arm in enumerate(arm_order)}
        if collect:
            diagnostics["support"] = CommonSupportReport(
                rule="rectangular", n_discarded=int((~eligible).sum()),
                eligible=eligible,
                thresholds={"lower": lower.tolist(), "upper": upper.tolist()})
            diagnostics["match"] = MatchResult(triplets=triplets,
                                               n_matched=n_matched,
                                               caliper=caliper)
        return means, n_matched

    means, n_matched = pipeline(dataset, seed, collect=True)
    support = diagnostics.pop("support")
    points = _point_contrasts(means, "ATT", t, reference)
    summaries = None
    if boot:
        def rep(ds, rep_seed):
            m, nm = pipeline(ds, rep_seed)
            vals = _point_contrasts(m, "ATT", t, reference)
            vals[("n_matched", "count")] = nm
            return vals

        summaries, n_failed, raw = bootstrap(rep, dataset, nboots, seed, workers)
        matched_counts = [r[("n_matched", "count")] for r in raw if r is not None]
        summaries = {k: v for k, v in summaries.items() if k[0] != "n_matched"}
        diagnostics["n_boot_failed"] = n_failed
        diagnostics["n_matched_replicates"] = {
            "min": int(np.min(matched_counts)),
            "median": float(np.median(matched_counts)),
            "max": int(np.max(matched_counts))}
    diagnostics["n_matched"] = n_matched
    meta = {"method": "VM", "estimand": "ATT", "reference": reference,
            "n": dataset.n, "n_matched": n_matched,
            "interval_method": "bootstrap" if boot else None}
    table = _table_from_points(points, "ATT", t, reference, meta, summaries)
    return EstimationResult(table, support, diagnostics)


# ---------------------------------------------------------------------------
# TMLE (ATE)


def _fluctuation_eps(y, offset, h, max_iter=50):
    """Intercept-free logistic fluctuation coefficient by scalar Newton."""
    eps = 0.0
    for _ in range(max_iter):
        mu = expit(offset + eps * h)
        score = float(np.sum(h * (y - mu)))
        info = float(np.sum(h * h * mu * (1 - mu)))
        if info <= 0 or abs(score) < 1e-10:
            break
        eps += score / info
    return eps


def tmle_estimate(dataset: Dataset, library=("logit", "ridge-logit", "tree"),
                  seed=None, boot=False, nboots=200, q_library=None,
                  gps_library=None, workers=1) -> EstimationResult:
    """Targeted maximum likelihood for the ATE with stacked-ensemble nuisances.

    Outcome stacking runs on (X, treatment dummies); the GPS stacking feeds
    the clever covariate I(W = w)/GPS_w, a one-parameter logistic fluctuation
    per arm updates the counterfactual predictions, and the targeted means
    are contrasted.  ``q_library``/``gps_library`` override ``library`` for
    one nuisance at a time.
    """
    seed = _as_seed_tuple(seed)
    q_library = library if q_library is None else q_library
    gps_library = library if gps_library is None else gps_library
    t = dataset.n_trt
    diagnostics = {}

    def arm_means_of(ds, rep_seed, collect=False):
        design = np.column_stack([ds.x, _dummies(ds.w, t)])
        q_model = StackedEnsemble(library=q_library,
                                  seed=_seed_int(rep_seed + (1,))).fit(design, ds.y)
        gps = StackedGps(library=gps_library,
                         seed=_seed_int(rep_seed + (2,))).fit(ds.x, ds.w) \
            .predict_gps(ds.x).values
        n_floored = int((gps < _GPS_FLOOR).sum())
        if n_floored and collect:
            warnings.warn(f"{n_floored} GPS value(s) below {_GPS_FLOOR} were floored")
        gps = np.clip(gps, _GPS_FLOOR, None)
        means, eps_all = {}, {}
        for arm in range(1, t + 1):
            cf = np.column_stack([ds.x, _cf_dummies(arm, ds.n, t)])
            q = np.clip(q_model.predict_proba(cf), 1e-6, 1 - 1e-6)
            g = gps[:, arm - 1]
            delta = (ds.w == arm).astype(float)
            h = delta / g
            eps = _fluctuation_eps(ds.y, logit(q), h)
            q_star = expit(logit(q) + eps / g)
            means[arm] = float(q_star.mean())
            eps_all[arm] = eps
        if collect:
            diagnostics["epsilon"] = eps_all
            diagnostics["n_gps_floored"] = n_floored
        return means

    means = arm_means_of(dataset, seed, collect=True)
    points = _point_contrasts(means, "ATE", t, None)
    summaries = None
    if boot:
        def rep(ds, rep_seed):
            return _point_contrasts(arm_means_of(ds, rep_seed), "ATE", t, None)
        summaries, n_failed, _ = bootstrap(rep, dataset, nboots, seed, workers)
        diagnostics["n_boot_failed"] = n_failed
    meta = {"method": "TMLE", "estimand": "ATE", "reference": None,
            "n": dataset.n, "interval_method": "bootstrap" if boot else None}
    table = _table_from_points(points, "ATE", t, None, meta, summaries)
    return EstimationResult(table, None, diagnostics)
