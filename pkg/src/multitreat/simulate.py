"""Synthetic data generation for multiple-treatment studies with binary outcomes.

Units receive one of ``n_trt`` treatments through a multinomial logistic
assignment model and carry a full matrix of potential binary outcomes, so the
true effects behind any estimator run are computable from the output.

The assignment log-odds of treatment t against the last treatment are

    eta_t = delta_t + psi * (lp_w_t + nlp_w_t),   t = 1..T-1,   eta_T = 0,

where ``lp_w`` / ``nlp_w`` are formula strings in the covariates (see
:mod:`multitreat.formulas`) and ``psi`` scales how strongly covariates drive
assignment.  Potential outcomes are Bernoulli with

    P(Y(t) = 1 | x) = expit(tau_t + lp_y_t + nlp_y_t).

Randomness is consumed in a fixed order: covariate columns left to right, one
assignment uniform per unit, then one outcome uniform per (unit, treatment)
pair in row-major order.  Two runs with the same seed are identical, and the
outcome for treatment t does not depend on which arm was assigned.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import expit

from .data import Dataset, GpsMatrix, five_number_summary, validate_dataset
from .formulas import eval_formula, is_dist_call, parse_expr, sample_dist
from .validation import ValidationError, check_positive, rng_from


@dataclass
class SimConfig:
    """Configuration of one simulated dataset.

    Parameters
    ----------
    sample_size : int
        Number of units.
    n_trt : int
        Number of treatment arms T (>= 2).
    x : list of str
        One distribution call per covariate, e.g. ``"rnorm(300, 0, 0.5)"``.
        A leading sample-size argument is accepted and ignored.
    lp_y, nlp_y : list of str or None
        Linear and nonlinear outcome predictors, one formula per arm
        (length T).  ``None`` means no contribution.
    align : bool
        When True the treatment predictors reuse the first T-1 outcome
        predictor strings and ``lp_w`` / ``nlp_w`` must be omitted.
    lp_w, nlp_w : list of str or None
        Treatment-assignment predictors, length T-1.  ``lp_w`` is required
        unless ``align`` is set; ``nlp_w`` may be omitted.
    tau : sequence of float, length T
        Outcome intercepts, one per arm.
    delta : sequence of float, length T-1
        Assignment intercepts against the last arm.
    psi : float
        Nonnegative scale on the covariate part of the assignment model;
        0 gives assignment driven by ``delta`` alone.
    """

    sample_size: int
    n_trt: int
    x: list[str]
    tau: list[float]
    delta: list[float]
    psi: float = 1.0
    lp_y: list[str] | None = None
    nlp_y: list[str] | None = None
    align: bool = False
    lp_w: list[str] | None = None
    nlp_w: list[str] | None = None

    def __post_init__(self):
        if self.sample_size < 1:
            raise ValidationError(f"sample_size must be >= 1, got {self.sample_size}")
        if self.n_trt < 2:
            raise ValidationError(f"n_trt must be >= 2, got {self.n_trt}")
        if not self.x:
            raise ValidationError("need at least one covariate generator in x")
        for j, expr in enumerate(self.x):
            if not is_dist_call(expr):
                raise ValidationError(
                    f"covariate generator {j + 1} must be a distribution call, got {expr!r}")
        t = self.n_trt
        _check_len("tau", self.tau, t)
        _check_len("delta", self.delta, t - 1)
        check_positive(self.psi, "psi", strict=False)
        _check_len("lp_y", self.lp_y, t, optional=True)
        _check_len("nlp_y", self.nlp_y, t, optional=True)
        if self.align:
            if self.lp_w is not None or self.nlp_w is not None:
                raise ValidationError("align=True reuses the outcome predictors; "
                                      "do not pass lp_w / nlp_w as well")
            if self.lp_y is None and self.nlp_y is None:
                raise ValidationError("align=True needs outcome predictors to reuse")
        else:
            _check_len("lp_w", self.lp_w, t - 1)
            _check_len("nlp_w", self.nlp_w, t - 1, optional=True)

    def treatment_predictors(self):
        if self.align:
            take = lambda lst: None if lst is None else list(lst[: self.n_trt - 1])
            return take(self.lp_y), take(self.nlp_y)
        return self.lp_w, self.nlp_w

    @classmethod
    def from_json_dict(cls, d: dict) -> "SimConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown simulation config key(s): {sorted(extra)}")
        missing = {"sample_size", "n_trt", "x", "tau", "delta"} - set(d)
        if missing:
            raise ValidationError(f"simulation config missing key(s): {sorted(missing)}")
        return cls(**d)


def _check_len(name, value, expected, optional=False):
    if value is None:
        if optional:
            return
        raise ValidationError(f"{name} is required")
    if len(value) != expected:
        raise ValidationError(f"{name} must have length {expected}, got {len(value)}")


@dataclass
class SimOutput:
    """Everything produced by one simulation run, truth included."""

    dataset: Dataset
    y_truth: np.ndarray          # (n, T) potential outcomes
    true_gps: GpsMatrix          # (n, T) assignment probabilities
    y_prev: dict[str, float]     # observed prevalence per arm + overall
    ratio_of_units: dict[str, float]
    overlap_data: list[dict]     # five-number summaries per (gps column, group)
    seed: int | None = None
    config: SimConfig | None = None


def _predictor_sum(exprs, x, n_cols, n):
    total = np.zeros((n, n_cols))
    if exprs is None:
        return total
    for t, expr in enumerate(exprs):
        if expr:
            total[:, t] = eval_formula(expr, x)
    return total


def simulate(config: SimConfig, seed: int | None = None) -> SimOutput:
    """Generate one dataset plus its underlying truth.

    Returns a :class:`SimOutput` carrying the observed dataset, the full
    potential-outcome matrix, the true generalized propensity scores, observed
    prevalence by arm, arm shares, and per-(gps column, group) five-number
    summaries for overlap diagnostics.
    """
    rng = rng_from(seed)
    n, t = config.sample_size, config.n_trt

    x = np.column_stack([sample_dist(parse_expr(expr), n, rng) for expr in config.x])

    gps = assign_probabilities(config, x)
    u = rng.random(n)
    w = np.minimum((u[:, None] > np.cumsum(gps, axis=1)).sum(axis=1) + 1, t)

    p_outcome = outcome_probabilities(config, x)
    u_y = rng.random((n, t))
    y_truth = (u_y < p_outcome).astype(np.int64)
    y = y_truth[np.arange(n), w - 1]

    dataset = validate_dataset(x, w, y)
    y_prev = {str(a): float(y[w == a].mean()) for a in range(1, t + 1) if np.any(w == a)}
    y_prev["overall"] = float(y.mean())
    counts = np.bincount(w, minlength=t + 1)[1:]
    ratio = {str(a + 1): float(c / n) for a, c in enumerate(counts)}

    overlap = overlap_summaries(gps, w, t)
    return SimOutput(dataset=dataset, y_truth=y_truth, true_gps=GpsMatrix(gps),
                     y_prev=y_prev, ratio_of_units=ratio, overlap_data=overlap,
                     seed=seed, config=config)


def assign_probabilities(config: SimConfig, x: np.ndarray) -> np.ndarray:
    """True GPS matrix implied by the assignment model at covariates x."""
    n, t = x.shape[0], config.n_trt
    lp_w, nlp_w = config.treatment_predictors()
    eta = np.zeros((n, t))
    eta[:, : t - 1] = np.asarray(config.delta)[None, :] + config.psi * (
        _predictor_sum(lp_w, x, t - 1, n) + _predictor_sum(nlp_w, x, t - 1, n))
    eta -= eta.max(axis=1, keepdims=True)
    e = np.exp(eta)
    return e / e.sum(axis=1, keepdims=True)


def outcome_probabilities(config: SimConfig, x: np.ndarray) -> np.ndarray:
    """P(Y(t) = 1 | x) for every arm, shape (n, T)."""
    n, t = x.shape[0], config.n_trt
    lin = _predictor_sum(config.lp_y, x, t, n) + _predictor_sum(config.nlp_y, x, t, n)
    return expit(np.asarray(config.tau)[None, :] + lin)


def overlap_summaries(gps: np.ndarray, w: np.ndarray, n_trt: int) -> list[dict]:
    """Five-number summaries of each GPS column within each observed group."""
    records = []
    for col in range(1, n_trt + 1):
        for group in range(1, n_trt + 1):
            mask = w == group
            if not np.any(mask):
                continue
            rec = {"gps_column": col, "group": group}
            rec.update(five_number_summary(gps[mask, col - 1]))
            records.append(rec)
    return records


def write_outputs(out: SimOutput, out_dir, include_truth: bool = False) -> dict[str, str]:
    """Persist a run: dataset.csv, summary.json, optionally truth.csv.

    The truth file holds the potential-outcome matrix (columns ``yt1..ytT``)
    and the true GPS (columns ``gps1..gpsT``).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}

    data_path = out_dir / "dataset.csv"
    out.dataset.to_csv(data_path)
    paths["dataset"] = str(data_path)

    summary = {"y_prev": out.y_prev, "ratio_of_units": out.ratio_of_units,
               "overlap_data": out.overlap_data}
    if out.seed is not None:
        summary["seed"] = out.seed
    summary_path = out_dir / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    paths["summary"] = str(summary_path)

    if include_truth:
        t = out.y_truth.shape[1]
        truth = pd.DataFrame(
            np.column_stack([out.y_truth.astype(float), out.true_gps.values]),
            columns=[f"yt{i+1}" for i in range(t)] + [f"gps{i+1}" for i in range(t)])
        truth_path = out_dir / "truth.csv"
        truth.to_csv(truth_path, index=False)
        paths["truth"] = str(truth_path)
    return paths
