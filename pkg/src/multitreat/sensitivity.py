"""Monte Carlo sensitivity analysis for unmeasured confounding.

The caller drops the suspect confounder from the covariate set and supplies a
prior for each confounding function c(w, w', x), the expected difference in
the potential outcome Y(w) between units observed under w and under w'.  The
analysis then (1) draws M1 generalized-propensity-score posteriors from a
multinomial BART fit, (2) draws M2 sets of confounding-function values per
GPS draw, (3) subtracts the implied contamination from every observed
outcome, and (4) refits a continuous BART outcome model per adjusted dataset,
pooling all M1 x M2 x ndpost posterior contrast draws.

Adjusted outcomes are continuous, so results are reported on the risk
difference scale only.  The (m1, m2) fits are an embarrassingly parallel map
with per-fit seeds derived from (master seed, m1, m2) and an ordered reduce,
making results independent of the worker count.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .bart import BartPriors, fit_continuous_bart, fit_multinomial_bart_gps
from .data import (Dataset, EffectEstimate, EffectTable, contrast_label,
                   pairwise_contrasts, summarize_replicates)
from .formulas import expand_grid, is_dist_call, is_seq_call, parse_expr, sample_dist
from .validation import (EstimationError, ValidationError, check_choice,
                         ensure_seed_tuple, rng_from)

_RD_ONLY_NOTE = ("adjusted outcomes are continuous, so effects are reported "
                 "on the risk difference scale only; risk and odds ratios are "
                 "undefined here")


def pair_order(n_trt: int) -> list[tuple[int, int]]:
    """Column order of stratified confounding-function matrices.

    Three treatments use the conventional order c(1,2), c(2,1), c(2,3),
    c(1,3), c(3,1), c(3,2); other counts fall back to lexicographic ordered
    pairs.
    """
    if n_trt == 3:
        return [(1, 2), (2, 1), (2, 3), (1, 3), (3, 1), (3, 2)]
    return [(a, b) for a in range(1, n_trt + 1)
            for b in range(1, n_trt + 1) if a != b]


@dataclass
class ConfoundingFunctionPrior:
    """One prior per ordered treatment pair, optionally stratified.

    ``entries[(w, w')]`` is a point mass (scalar), a per-stratum vector of
    point masses, or a formula string: a distribution call redrawn once per
    (m1, m2) replicate, or a ``seq(...)`` grid (only meaningful inside
    :func:`contour_grid`).  ``stratum`` names the covariate whose values
    index vector rows; rows follow the covariate's unique values in
    descending order, so a binary stratum reads (1, 0).
    """

    entries: dict[tuple[int, int], object]
    stratum: str | None = None

    def validate(self, n_trt: int) -> None:
        expected = set(pair_order(n_trt))
        got = {tuple(int(v) for v in k) for k in self.entries}
        if got != expected:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise ValidationError(
                f"confounding prior must cover every ordered pair; "
                f"missing {missing}, unexpected {extra}")
        lengths = set()
        for pair, entry in self.entries.items():
            if isinstance(entry, str):
                if not (is_dist_call(entry) or is_seq_call(entry)):
                    raise ValidationError(
                        f"prior for c{pair} must be a distribution or seq "
                        f"expression, got {entry!r}")
            else:
                arr = np.atleast_1d(np.asarray(entry, dtype=float))
                if arr.ndim != 1 or not np.all(np.isfinite(arr)):
                    raise ValidationError(
                        f"prior for c{pair} must be a finite scalar or vector")
                lengths.add(arr.size)
        vector_lengths = {s for s in lengths if s > 1}
        if len(vector_lengths) > 1:
            raise ValidationError(
                f"stratified priors disagree on stratum count: {sorted(vector_lengths)}")
        if vector_lengths and self.stratum is None:
            raise ValidationError("per-stratum prior vectors need a stratum covariate")

    def n_strata(self) -> int:
        sizes = [np.atleast_1d(np.asarray(e, dtype=float)).size
                 for e in self.entries.values() if not isinstance(e, str)]
        return max(sizes, default=1)

    def gridded_pairs(self) -> list[tuple[int, int]]:
        ordered = [p for p in pair_order(self._n_trt_guess())
                   if isinstance(self.entries.get(p), str)
                   and is_seq_call(self.entries[p])]
        return ordered

    def _n_trt_guess(self) -> int:
        return int(max(max(p) for p in self.entries))

    @classmethod
    def from_matrix(cls, matrix, n_trt: int = 3,
                    stratum: str | None = None) -> "ConfoundingFunctionPrior":
        """Build from a (strata x pairs) matrix in the :func:`pair_order` layout."""
        matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        order = pair_order(n_trt)
        if matrix.shape[1] != len(order):
            raise ValidationError(
                f"matrix must have {len(order)} columns (ordered pairs for "
                f"T={n_trt}), got {matrix.shape[1]}")
        entries = {pair: matrix[:, j].copy() for j, pair in enumerate(order)}
        prior = cls(entries=entries, stratum=stratum)
        prior.validate(n_trt)
        return prior


@dataclass
class SaConfig:
    """Monte Carlo layout of one sensitivity analysis."""

    m1: int
    m2: int = 1
    ndpost: int = 100
    estimand: str = "ATE"
    reference: int | None = None
    workers: int = 1
    seed: int | tuple | None = None
    gap: int = 10
    burn: int = 100
    priors: BartPriors | None = None       # forwarded to every BART fit

    def __post_init__(self):
        if self.m1 < 1 or self.m2 < 1:
            raise ValidationError("m1 and m2 must be >= 1")
        check_choice(self.estimand, {"ATE", "ATT"}, "estimand")
        if self.estimand == "ATT" and self.reference is None:
            raise ValidationError("ATT requires a reference treatment")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")


@dataclass
class SaResult:
    table: EffectTable
    draws: dict[str, np.ndarray]   # pooled, M1*M2*ndpost per contrast
    note: str = _RD_ONLY_NOTE
    n_fits: int = 0


@dataclass
class ContourGrid:
    """Adjusted estimates of one contrast over a 2-d confounding grid."""

    pair_a: tuple[int, int]
    pair_b: tuple[int, int]
    a_values: np.ndarray
    b_values: np.ndarray
    estimates: np.ndarray          # shape (len(a_values), len(b_values))
    target: str

    def to_rows(self):
        rows = []
        for i, a in enumerate(self.a_values):
            for j, b in enumerate(self.b_values):
                rows.append({"c_pair_a": float(a), "c_pair_b": float(b),
                             "estimate": float(self.estimates[i, j])})
        return rows

    def to_json_dict(self):
        return {"pair_a": list(self.pair_a), "pair_b": list(self.pair_b),
                "a_values": self.a_values.tolist(),
                "b_values": self.b_values.tolist(),
                "estimates": self.estimates.tolist(), "target": self.target}


# ---------------------------------------------------------------------------
# core formulas


def adjust_outcomes(y, w, gps_draw, c_draw, strata=None) -> np.ndarray:
    """Confounding-adjusted outcomes Y - sum_{l != w_i} P(W=l|X) c(w_i, l, x).

    ``gps_draw`` has shape (T, n); ``c_draw`` maps each ordered pair to a
    per-stratum vector; ``strata`` holds each unit's stratum row (all zeros
    when omitted).  All-zero draws return outcomes bit-equal to ``y``.
    """
    y = np.asarray(y, dtype=float).ravel()
    w = np.asarray(w, dtype=np.int64).ravel()
    gps_draw = np.asarray(gps_draw, dtype=float)
    t, n = gps_draw.shape
    if len(y) != n or len(w) != n:
        raise ValidationError("y, w, and gps_draw disagree on sample size")
    strata = np.zeros(n, dtype=int) if strata is None \
        else np.asarray(strata, dtype=int).ravel()

    adjusted = y.copy()
    for g in range(1, t + 1):
        mask = w == g
        if not np.any(mask):
            continue
        for l in range(1, t + 1):
            if l == g:
                continue
            if (g, l) not in c_draw:
                raise ValidationError(f"confounding draw is missing pair ({g}, {l})")
            vals = np.atleast_1d(np.asarray(c_draw[(g, l)], dtype=float))
            per_unit = vals[strata[mask]] if vals.size > 1 else vals[0]
            adjusted[mask] -= per_unit * gps_draw[l - 1, mask]
    return adjusted


def bias_from_confounding(gps_row, c_values, pair) -> float:
    """Confounding bias of the naive (w, w') risk difference at one x.

    Bias(w, w') = -p_w c(w', w) + p_{w'} c(w, w')
                  - sum_{l not in {w, w'}} p_l [c(w', l) - c(w, l)].
    """
    p = np.asarray(gps_row, dtype=float).ravel()
    w, wp = int(pair[0]), int(pair[1])
    bias = -p[w - 1] * c_values[(wp, w)] + p[wp - 1] * c_values[(w, wp)]
    for l in range(1, len(p) + 1):
        if l in (w, wp):
            continue
        bias -= p[l - 1] * (c_values[(wp, l)] - c_values[(w, l)])
    return float(bias)


def pool_draws(fit_draws: list[dict]) -> dict[str, np.ndarray]:
    """Concatenate per-fit posterior contrast draws, preserving fit order."""
    if not fit_draws:
        raise ValidationError("no fits to pool")
    keys = list(fit_draws[0])
    counts = {len(np.asarray(d[k]).ravel()) for d in fit_draws for k in keys}
    if any(set(d) != set(keys) for d in fit_draws) or len(counts) != 1:
        raise ValidationError("fits disagree on contrast labels or draw counts")
    return {k: np.concatenate([np.asarray(d[k], dtype=float).ravel()
                               for d in fit_draws]) for k in keys}


# ---------------------------------------------------------------------------
# orchestration


def _strata_indices(dataset: Dataset, prior: ConfoundingFunctionPrior):
    n_strata = prior.n_strata()
    if n_strata == 1:
        return np.zeros(dataset.n, dtype=int), 1
    if prior.stratum not in dataset.covariate_names:
        raise ValidationError(
            f"stratum covariate {prior.stratum!r} not in dataset "
            f"({dataset.covariate_names})")
    col = dataset.x[:, dataset.covariate_names.index(prior.stratum)]
    levels = np.unique(col)[::-1]            # descending: binary reads (1, 0)
    if len(levels) != n_strata:
        raise ValidationError(
            f"stratum covariate {prior.stratum!r} has {len(levels)} level(s) "
            f"but the prior supplies {n_strata} row(s)")
    return np.searchsorted(-levels, -col), len(levels)


def _draw_c(prior: ConfoundingFunctionPrior, n_strata: int, rng,
            n_trt: int) -> dict:
    out = {}
    for pair in pair_order(n_trt):
        entry = prior.entries[pair]
        if isinstance(entry, str):
            if is_seq_call(entry):
                raise ValidationError(
                    f"prior for c{pair} is a grid; use contour_grid for "
                    "gridded pairs")
            value = float(sample_dist(parse_expr(entry), 1, rng)[0])
            out[pair] = np.full(n_strata, value)
        else:
            arr = np.atleast_1d(np.asarray(entry, dtype=float))
            out[pair] = arr if arr.size == n_strata else np.full(n_strata, arr[0])
    return out


def _sa_fit(payload):
    """One adjusted-outcome BART fit; module-level so workers can pickle it."""
    (index, design, ycf, x_target, n_trt, contrasts, estimand, ndpost, burn,
     priors, seed) = payload
    try:
        fit = fit_continuous_bart(design, ycf, ndpost=ndpost, burn=burn,
                                  priors=priors, seed=seed)
        arm_means = {}
        for arm in range(1, n_trt + 1):
            cf = np.column_stack([x_target,
                                  np.full(x_target.shape[0], float(arm))])
            arm_means[arm] = fit.predict(cf).mean(axis=1)
        return {contrast_label(estimand, a, b): arm_means[a] - arm_means[b]
                for a, b in contrasts}
    except Exception as exc:
        raise EstimationError(
            f"sensitivity fit (m1={index[0]}, m2={index[1]}) failed: {exc}") from exc


def run_sa(dataset: Dataset, prior: ConfoundingFunctionPrior,
           config: SaConfig) -> SaResult:
    """Full sensitivity analysis; deterministic given ``config.seed``."""
    t = dataset.n_trt
    prior.validate(t)
    if prior.gridded_pairs():
        raise ValidationError(
            "prior contains seq() grids; run contour_grid instead")
    seed = ensure_seed_tuple(config.seed)
    mgps = fit_multinomial_bart_gps(dataset.x, dataset.w, config.m1,
                                    gap=config.gap, burn=config.burn,
                                    priors=config.priors, seed=seed + (1,))
    return _run_with_gps(dataset, prior, config, seed, mgps.gps_draws)


def _run_with_gps(dataset, prior, config, seed, gps_draws) -> SaResult:
    t = dataset.n_trt
    strata, n_strata = _strata_indices(dataset, prior)
    contrasts = pairwise_contrasts(config.estimand, t, config.reference)
    if config.estimand == "ATT":
        x_target = dataset.x[dataset.w == config.reference]
        if x_target.shape[0] == 0:
            raise EstimationError(f"reference arm {config.reference} has no units")
    else:
        x_target = dataset.x
    design = np.column_stack([dataset.x, dataset.w.astype(float)])

    payloads = []
    for m1 in range(config.m1):
        for m2 in range(config.m2):
            c = _draw_c(prior, n_strata, rng_from(seed + (2, m1, m2)), t)
            ycf = adjust_outcomes(dataset.y, dataset.w, gps_draws[m1], c, strata)
            payloads.append(((m1, m2), design, ycf, x_target, t, contrasts,
                             config.estimand, config.ndpost, config.burn,
                             config.priors, seed + (3, m1, m2)))

    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            fits = list(pool.map(_sa_fit, payloads))
    else:
        fits = [_sa_fit(p) for p in payloads]

    pooled = pool_draws(fits)
    entries = {}
    for label, vec in pooled.items():
        s = summarize_replicates(vec)
        entries[label] = {"RD": EffectEstimate(scale="RD", est=s.est, se=s.se,
                                               lower=s.lower, upper=s.upper)}
    meta = {"method": "SA-BART", "estimand": config.estimand,
            "reference": config.reference, "m1": config.m1, "m2": config.m2,
            "ndpost": config.ndpost, "n": dataset.n, "note": _RD_ONLY_NOTE,
            "interval_method": "pooled-posterior"}
    table = EffectTable(entries=entries, metadata=meta)
    return SaResult(table=table, draws=pooled, n_fits=len(fits))


def contour_grid(dataset: Dataset, prior: ConfoundingFunctionPrior,
                 config: SaConfig, target_pair) -> ContourGrid:
    """Adjusted estimates of ``target_pair`` over two gridded priors.

    Exactly two prior entries must be ``seq(...)`` grids; each grid cell
    reruns the analysis with those pairs fixed at the cell values.  The GPS
    posterior is fit once and shared, so cells differ only through the
    confounding values.
    """
    t = dataset.n_trt
    prior.validate(t)
    gridded = prior.gridded_pairs()
    if len(gridded) != 2:
        raise ValidationError(
            f"contour_grid needs exactly 2 gridded pairs, found {len(gridded)}")
    pair_a, pair_b = gridded
    a_values = expand_grid(prior.entries[pair_a])
    b_values = expand_grid(prior.entries[pair_b])
    target = contrast_label(config.estimand,
                            int(target_pair[0]), int(target_pair[1]))

    seed = ensure_seed_tuple(config.seed)
    mgps = fit_multinomial_bart_gps(dataset.x, dataset.w, config.m1,
                                    gap=config.gap, burn=config.burn,
                                    priors=config.priors, seed=seed + (1,))
    estimates = np.empty((a_values.size, b_values.size))
    for i, a in enumerate(a_values):
        for j, b in enumerate(b_values):
            cell_entries = dict(prior.entries)
            cell_entries[pair_a] = float(a)
            cell_entries[pair_b] = float(b)
            cell_prior = ConfoundingFunctionPrior(entries=cell_entries,
                                                  stratum=prior.stratum)
            result = _run_with_gps(dataset, cell_prior, config, seed,
                                   mgps.gps_draws)
            estimates[i, j] = result.table[target]["RD"].est
    return ContourGrid(pair_a=pair_a, pair_b=pair_b, a_values=a_values,
                       b_values=b_values, estimates=estimates, target=target)
