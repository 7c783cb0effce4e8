"""Data model for multiple-treatment causal analyses with binary outcomes.

The central objects are :class:`Dataset` (covariates, an integer treatment
column, a binary outcome), :class:`GpsMatrix` (per-unit generalized propensity
scores), and :class:`EffectTable` (pairwise effect estimates on the risk
difference, risk ratio, and odds ratio scales).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .validation import (
    ValidationError,
    as_float_matrix,
    check_binary,
    check_choice,
    check_same_length,
)

SCALES = ("RD", "RR", "OR")

_SIMPLEX_TOL = 1e-10


@dataclass
class Dataset:
    """A cross-sectional sample with covariates, treatment, and binary outcome.

    Parameters
    ----------
    x : ndarray of shape (n, p)
        Covariate matrix, finite floats.
    w : ndarray of shape (n,)
        Treatment labels in ``{1, ..., n_trt}``.
    y : ndarray of shape (n,)
        Binary outcome in ``{0, 1}``.
    covariate_names : list of str, optional
        Defaults to ``x1..xp``.
    label_map : dict, optional
        Original-to-contiguous treatment relabeling applied by
        :func:`validate_dataset`; identity when no relabeling was needed.
    """

    x: np.ndarray
    w: np.ndarray
    y: np.ndarray
    covariate_names: list[str] = field(default_factory=list)
    label_map: dict[int, int] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.w)

    @property
    def n_covariates(self) -> int:
        return self.x.shape[1]

    @property
    def n_trt(self) -> int:
        return int(self.w.max()) if len(self.w) else 0

    def arm_sizes(self) -> np.ndarray:
        return np.bincount(self.w, minlength=self.n_trt + 1)[1:]

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.x, columns=self.covariate_names)
        df["w"] = self.w
        df["y"] = self.y
        return df

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "Dataset":
        for col in ("w", "y"):
            if col not in df.columns:
                raise ValidationError(f"dataset is missing required column {col!r}")
        names = [c for c in df.columns if c not in ("w", "y")]
        return validate_dataset(df[names].to_numpy(dtype=float), df["w"].to_numpy(),
                                df["y"].to_numpy(), covariate_names=names)

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        return cls.from_frame(pd.read_csv(path))


def validate_dataset(x, w, y, covariate_names=None, n_trt=None) -> Dataset:
    """Check and normalize raw arrays into a :class:`Dataset`.

    Treatment labels that are not already contiguous ``1..T`` are relabeled by
    order of first appearance and the mapping is recorded on the result.

    Raises
    ------
    ValidationError
        On non-binary outcomes, an empty treatment arm (when ``n_trt`` names
        more arms than the data contain), or length mismatches.
    """
    x = as_float_matrix(x, "x")
    w = np.asarray(w)
    if w.dtype.kind == "f":
        if not np.allclose(w, np.rint(w), atol=0, rtol=0):
            raise ValidationError("treatment column w must be integer-valued")
        w = np.rint(w)
    w = w.astype(np.int64).ravel()
    y = check_binary(y, "y")
    check_same_length("x", x, "w", w)
    check_same_length("w", w, "y", y)
    if len(w) == 0:
        raise ValidationError("dataset is empty")

    labels = np.unique(w)
    contiguous = labels[0] == 1 and labels[-1] == len(labels)
    if contiguous:
        label_map = {int(v): int(v) for v in labels}
    else:
        first_seen = pd.unique(w)
        label_map = {int(orig): i + 1 for i, orig in enumerate(first_seen)}
        w = np.array([label_map[int(v)] for v in w], dtype=np.int64)

    t = int(w.max())
    if n_trt is not None and n_trt != t:
        missing = sorted(set(range(1, n_trt + 1)) - set(np.unique(w).tolist()))
        raise ValidationError(
            f"expected {n_trt} treatment arms but found {t}; empty arm(s): {missing}")
    if t < 2:
        raise ValidationError(f"need at least 2 treatment arms, found {t}")

    names = list(covariate_names) if covariate_names else [f"x{j+1}" for j in range(x.shape[1])]
    if len(names) != x.shape[1]:
        raise ValidationError(
            f"got {len(names)} covariate names for {x.shape[1]} columns")
    return Dataset(x=x, w=w, y=y, covariate_names=names, label_map=label_map)


@dataclass(frozen=True)
class ContrastSpec:
    """A contrast between two disjoint treatment groups.

    ``s1`` and ``s2`` are tuples of treatment labels; the contrast compares
    the average potential outcome under ``s1`` against ``s2``.  For ATT the
    expectation conditions on membership in the reference group ``s1``.
    """

    estimand: str
    s1: tuple[int, ...]
    s2: tuple[int, ...]

    def __post_init__(self):
        check_choice(self.estimand, {"ATE", "ATT"}, "estimand")
        if not self.s1 or not self.s2:
            raise ValidationError("contrast groups must be non-empty")
        if set(self.s1) & set(self.s2):
            raise ValidationError(
                f"contrast groups overlap: {sorted(set(self.s1) & set(self.s2))}")


@dataclass(frozen=True)
class EffectEstimate:
    """One effect estimate on a single scale.

    ``se``, ``lower``, and ``upper`` are ``None`` for point-only outputs.
    """

    scale: str
    est: float
    se: float | None = None
    lower: float | None = None
    upper: float | None = None

    def __post_init__(self):
        check_choice(self.scale, set(SCALES), "scale")
        if not np.isfinite(self.est):
            raise ValidationError(f"{self.scale} estimate is not finite")
        if self.scale == "RD" and not -1.0 <= self.est <= 1.0:
            raise ValidationError(f"RD estimate {self.est} outside [-1, 1]")
        if self.scale in ("RR", "OR") and self.est <= 0:
            raise ValidationError(f"{self.scale} estimate {self.est} must be positive")

    def to_json_dict(self):
        out = {"est": float(self.est)}
        for k in ("se", "lower", "upper"):
            v = getattr(self, k)
            out[k] = None if v is None else float(v)
        return out

    @classmethod
    def from_json_dict(cls, scale, d):
        return cls(scale=scale, est=d["est"], se=d.get("se"),
                   lower=d.get("lower"), upper=d.get("upper"))


class GpsMatrix:
    """Generalized propensity scores: one simplex row per unit.

    Entries must lie strictly inside ``(0, 1)`` and each row must sum to one
    within ``1e-10``.
    """

    def __init__(self, values):
        values = as_float_matrix(values, "gps")
        if np.any(values <= 0) or np.any(values >= 1):
            i, j = np.argwhere((values <= 0) | (values >= 1))[0]
            raise ValidationError(
                f"gps entry at row {i}, column {j} is {values[i, j]}; "
                "entries must lie strictly in (0, 1)")
        bad = np.abs(values.sum(axis=1) - 1.0) > _SIMPLEX_TOL
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise ValidationError(
                f"gps row {i} sums to {values[i].sum():.12f}, not 1 within {_SIMPLEX_TOL}")
        self.values = values

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def n_trt(self):
        return self.values.shape[1]

    def column(self, treatment: int) -> np.ndarray:
        return self.values[:, treatment - 1]


@dataclass
class PosteriorDraws:
    """An ``M x n`` matrix of posterior draws of P(Y = 1 | ...)."""

    draws: np.ndarray

    def __post_init__(self):
        self.draws = np.asarray(self.draws, dtype=float)
        if self.draws.ndim != 2:
            raise ValidationError("posterior draws must be a 2-d (M, n) array")
        if np.any(self.draws < 0) or np.any(self.draws > 1):
            raise ValidationError("posterior draws must lie in [0, 1]")

    @property
    def n_draws(self):
        return self.draws.shape[0]


class Summary:
    """Mean / sd / percentile-interval summary of a vector of estimates."""

    __slots__ = ("est", "se", "lower", "upper")

    def __init__(self, est, se, lower, upper):
        self.est, self.se, self.lower, self.upper = est, se, lower, upper

    def __iter__(self):
        return iter((self.est, self.se, self.lower, self.upper))

    def __repr__(self):
        return (f"Summary(est={self.est:.6g}, se={self.se:.6g}, "
                f"lower={self.lower:.6g}, upper={self.upper:.6g})")


def summarize_replicates(values, what="replicate") -> Summary:
    """Summarize replicate (or posterior-draw) estimates.

    Returns the mean, the sample standard deviation, and the 2.5 / 97.5
    percentiles computed with linear interpolation.
    """
    values = np.asarray(values, dtype=float).ravel()
    if values.size < 2:
        raise ValidationError(f"need at least 2 {what} values, got {values.size}")
    bad = ~np.isfinite(values)
    if np.any(bad):
        idx = int(np.flatnonzero(bad)[0])
        raise ValidationError(f"{what} {idx} produced a non-finite value")
    lower, upper = np.percentile(values, [2.5, 97.5])
    return Summary(float(values.mean()), float(values.std(ddof=1)),
                   float(lower), float(upper))


def contrast_from_draws(p1, p2, scales=SCALES) -> dict[str, EffectEstimate]:
    """Turn paired draws of two group means into RD / RR / OR estimates.

    Parameters
    ----------
    p1, p2 : ndarray of shape (B,)
        Per-draw (or per-replicate) means of P(Y=1) under the two groups,
        aligned by draw index.

    Returns
    -------
    dict mapping scale name to :class:`EffectEstimate`, where ``est`` is the
    draw mean, ``se`` the draw standard deviation, and the interval the
    2.5 / 97.5 percentiles.
    """
    p1 = np.asarray(p1, dtype=float).ravel()
    p2 = np.asarray(p2, dtype=float).ravel()
    if p1.shape != p2.shape:
        raise ValidationError(f"draw vectors differ in length: {p1.size} vs {p2.size}")
    if p1.size < 2:
        raise ValidationError("need at least 2 draws for a contrast")
    need_ratio = any(s in scales for s in ("RR", "OR"))
    if need_ratio:
        stacked = np.concatenate([p1, p2])
        if np.any(stacked <= 0) or np.any(stacked >= 1):
            raise ValidationError(
                "degenerate probability draw (outside (0, 1)); "
                "RR and OR are undefined at 0 or 1")
    out = {}
    per_scale = {
        "RD": p1 - p2,
        "RR": (p1 / p2) if need_ratio else None,
        "OR": ((p1 / (1 - p1)) / (p2 / (1 - p2))) if need_ratio else None,
    }
    for scale in scales:
        draws = per_scale[scale]
        s = summarize_replicates(draws, what="draw")
        out[scale] = EffectEstimate(scale=scale, est=s.est, se=s.se,
                                    lower=s.lower, upper=s.upper)
    return out


def contrast_label(estimand: str, a: int, b: int) -> str:
    return f"{estimand}{a}{b}"


def pairwise_contrasts(estimand: str, n_trt: int, reference: int | None = None):
    """Enumerate the pairwise contrasts an analysis reports.

    ATE: all ordered pairs ``a < b``.  ATT: the reference arm against every
    other arm in ascending order.
    """
    check_choice(estimand, {"ATE", "ATT"}, "estimand")
    if estimand == "ATE":
        return [(a, b) for a in range(1, n_trt + 1) for b in range(a + 1, n_trt + 1)]
    if reference is None or not 1 <= reference <= n_trt:
        raise ValidationError(f"ATT needs a reference arm in 1..{n_trt}, got {reference}")
    return [(reference, b) for b in range(1, n_trt + 1) if b != reference]


@dataclass
class EffectTable:
    """Estimates for a set of labeled contrasts, one entry per scale.

    ``draws`` optionally retains the per-draw group means behind each entry so
    the ratio scales can be recomputed and audited; it is not serialized.
    """

    entries: dict[str, dict[str, EffectEstimate]]
    metadata: dict = field(default_factory=dict)
    draws: dict[str, tuple[np.ndarray, np.ndarray]] | None = None

    def labels(self):
        return list(self.entries)

    def __getitem__(self, label):
        return self.entries[label]

    def to_json_dict(self):
        out = {lab: {scale: est.to_json_dict() for scale, est in by_scale.items()}
               for lab, by_scale in self.entries.items()}
        if self.metadata:
            out["_metadata"] = _jsonable(self.metadata)
        return out

    @classmethod
    def from_json_dict(cls, d):
        meta = d.pop("_metadata", {}) if "_metadata" in d else {}
        entries = {lab: {scale: EffectEstimate.from_json_dict(scale, ed)
                         for scale, ed in by_scale.items()}
                   for lab, by_scale in d.items()}
        return cls(entries=entries, metadata=meta)

    def render(self, precision: int = 2) -> str:
        """Fixed-width text table with values rounded for display only."""
        cols = ["contrast"]
        for scale in SCALES:
            cols += [f"{scale}_est", f"{scale}_lower", f"{scale}_upper"]
        rows = [cols]
        for lab, by_scale in self.entries.items():
            row = [lab]
            for scale in SCALES:
                est = by_scale.get(scale)
                if est is None:
                    row += ["-", "-", "-"]
                else:
                    row += [_fmt(est.est, precision), _fmt(est.lower, precision),
                            _fmt(est.upper, precision)]
            rows.append(row)
        widths = [max(len(r[j]) for r in rows) for j in range(len(cols))]
        return "\n".join("  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in rows)


def _fmt(v, precision):
    return "-" if v is None else f"{v:.{precision}f}"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def five_number_summary(values) -> dict[str, float]:
    """min / q1 / median / q3 / max with linear-interpolation quantiles."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValidationError("cannot summarize an empty vector")
    q = np.percentile(values, [0, 25, 50, 75, 100])
    return {"min": float(q[0]), "q1": float(q[1]), "median": float(q[2]),
            "q3": float(q[3]), "max": float(q[4])}
