"""Penalized tensor-product spline logistic regression on logit-GPS coordinates.

The outcome model is additive: one unpenalized coefficient per treatment arm
(the intercept is absorbed) plus a smooth tensor-product function of the
first T-1 logit-GPS coordinates.  Marginal bases are cubic B-splines with
knots at coordinate quantiles; smoothness comes from second-difference
coefficient penalties combined per dimension and a single shared lambda
selected by GCV grid search.  The smooth is identified by a sum-to-zero
constraint over the training rows.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline
from scipy.linalg import null_space
from scipy.special import expit

from .validation import EstimationError, ValidationError, as_float_matrix

_DEGREE = 3


def _marginal_knots(col, K):
    lo, hi = float(col.min()), float(col.max())
    interior = np.quantile(col, np.linspace(0, 1, K - 2)[1:-1]) if K > 4 else []
    return np.concatenate([[lo] * (_DEGREE + 1), interior, [hi] * (_DEGREE + 1)])


def _marginal_design(col, knots):
    return BSpline.design_matrix(col, knots, _DEGREE).toarray()


@dataclass
class TensorSplineBasis:
    K: int
    D: int
    knots: list                      # per-dimension clamped knot vectors
    rows: np.ndarray                 # (n, K**D) training tensor design
    penalty: np.ndarray              # (K**D, K**D) summed per-dimension penalty
    constraint_z: np.ndarray = field(repr=False, default=None)

    @property
    def n_columns(self):
        return self.K ** self.D

    def evaluate(self, pts):
        """Tensor design at new points, clamped to the knot range.

        Returns (design, n_clamped) where n_clamped counts rows moved onto a
        boundary knot in at least one dimension.
        """
        pts = as_float_matrix(pts, "logit_gps")
        if pts.shape[1] != self.D:
            raise ValidationError(f"expected {self.D} coordinate column(s)")
        clamped = np.zeros(pts.shape[0], dtype=bool)
        design = np.ones((pts.shape[0], 1))
        for d in range(self.D):
            lo, hi = self.knots[d][0], self.knots[d][-1]
            col = pts[:, d]
            clamped |= (col < lo) | (col > hi)
            col = np.clip(col, lo, hi)
            marg = _marginal_design(col, self.knots[d])
            design = np.einsum("ij,ik->ijk", design, marg).reshape(pts.shape[0], -1)
        return design, int(clamped.sum())


def build_basis(logit_gps, K=5) -> TensorSplineBasis:
    """Tensor-product cubic B-spline basis on n x (T-1) logit-GPS columns."""
    pts = as_float_matrix(logit_gps, "logit_gps")
    if K < 4:
        raise ValidationError("K must be >= 4 for cubic B-splines")
    n, D = pts.shape
    if D < 1:
        raise ValidationError("need at least one GPS coordinate")
    knots = []
    for d in range(D):
        if pts[:, d].max() == pts[:, d].min():
            raise ValidationError(f"logit-GPS column {d + 1} is constant")
        knots.append(_marginal_knots(pts[:, d], K))

    rows = np.ones((n, 1))
    for d in range(D):
        marg = _marginal_design(pts[:, d], knots[d])
        rows = np.einsum("ij,ik->ijk", rows, marg).reshape(n, -1)

    diff2 = np.diff(np.eye(K), n=2, axis=0)
    marg_pen = diff2.T @ diff2
    penalty = np.zeros((K ** D, K ** D))
    for d in range(D):
        blocks = [marg_pen if e == d else np.eye(K) for e in range(D)]
        term = blocks[0]
        for b in blocks[1:]:
            term = np.kron(term, b)
        penalty += term

    basis = TensorSplineBasis(K=K, D=D, knots=knots, rows=rows, penalty=penalty)
    basis.constraint_z = null_space(rows.sum(axis=0)[None, :])
    return basis


@dataclass
class RamsFit:
    beta: np.ndarray          # per-treatment coefficients, intercept absorbed
    phi: np.ndarray           # spline coefficients, length K**D
    lam: float
    edf: float
    gcv: float
    basis: TensorSplineBasis
    gcv_curve: list           # (lambda, gcv) over the grid


def _binary_deviance(y, mu):
    mu = np.clip(mu, 1e-12, 1 - 1e-12)
    return -2.0 * float(np.sum(y * np.log(mu) + (1 - y) * np.log(1 - mu)))


def _pirls(y, design, pen, max_iter=50, tol=1e-8):
    """Penalized IRLS; returns (coef, deviance, edf) or None on divergence."""
    n, q = design.shape
    coef = np.zeros(q)
    eta = design @ coef
    dev = _binary_deviance(y, expit(eta))
    for _ in range(max_iter):
        mu = expit(eta)
        wt = np.clip(mu * (1 - mu), 1e-10, None)
        z = eta + (y - mu) / wt
        dw = design * wt[:, None]
        lhs = design.T @ dw + pen
        try:
            new_coef = np.linalg.solve(lhs, dw.T @ z)
        except np.linalg.LinAlgError:
            return None
        step = new_coef - coef
        scale = 1.0
        for _ in range(30):
            cand = coef + scale * step
            dev_cand = _binary_deviance(y, expit(design @ cand))
            obj_cand = dev_cand + float(cand @ pen @ cand)
            if np.isfinite(obj_cand) and obj_cand <= dev + float(coef @ pen @ coef) + 1e-12:
                break
            scale *= 0.5
        else:
            return None
        coef = coef + scale * step
        eta = design @ coef
        dev_new = _binary_deviance(y, expit(eta))
        if abs(dev_new - dev) < tol:
            dev = dev_new
            break
        dev = dev_new
    mu = expit(eta)
    wt = np.clip(mu * (1 - mu), 1e-10, None)
    dw = design * wt[:, None]
    gram = design.T @ dw
    try:
        edf = float(np.trace(np.linalg.solve(gram + pen, gram)))
    except np.linalg.LinAlgError:
        return None
    return coef, dev, edf


def fit_rams(y, w, basis: TensorSplineBasis, lambda_grid=None) -> RamsFit:
    """Fit the additive treatment + tensor-spline logistic model.

    Treatment coefficients are unpenalized; one shared smoothing parameter is
    chosen from ``lambda_grid`` (default 10 log-spaced points in
    [1e-4, 1e4]) by minimizing GCV = n * deviance / (n - edf)^2.
    """
    y = np.asarray(y, dtype=float).ravel()
    w = np.asarray(w, dtype=np.int64).ravel()
    if len(y) != basis.rows.shape[0] or len(w) != len(y):
        raise ValidationError("y, w, and basis rows must align")
    t = int(w.max())
    if lambda_grid is None:
        lambda_grid = np.logspace(-4, 4, 10)

    n = len(y)
    dummies = np.zeros((n, t))
    dummies[np.arange(n), w - 1] = 1.0
    z = basis.constraint_z
    design = np.column_stack([dummies, basis.rows @ z])
    pen_smooth = z.T @ basis.penalty @ z

    results = []
    for lam in lambda_grid:
        pen = np.zeros((design.shape[1], design.shape[1]))
        pen[t:, t:] = lam * pen_smooth
        out = _pirls(y, design, pen)
        if out is None:
            warnings.warn(f"PIRLS diverged at lambda={lam:g}; grid point skipped")
            continue
        coef, dev, edf = out
        if n - edf <= 0:
            warnings.warn(f"effective df exceeds n at lambda={lam:g}; skipped")
            continue
        gcv = n * dev / (n - edf) ** 2
        results.append((float(lam), gcv, coef, dev, edf))
    if not results:
        raise EstimationError("no smoothing parameter produced a stable fit")

    lam, gcv, coef, dev, edf = min(results, key=lambda r: r[1])
    return RamsFit(beta=coef[:t], phi=z @ coef[t:], lam=lam, edf=edf, gcv=gcv,
                   basis=basis, gcv_curve=[(r[0], r[1]) for r in results])


def predict_rams(fit: RamsFit, w_value, logit_gps):
    """Counterfactual probabilities under arm ``w_value``.

    Returns (probabilities, n_clamped); rows outside the knot range are
    clamped to the boundary knots and counted.
    """
    t = fit.beta.shape[0]
    if not 1 <= w_value <= t:
        raise ValidationError(f"w_value must be in 1..{t}")
    design, n_clamped = fit.basis.evaluate(logit_gps)
    eta = fit.beta[w_value - 1] + design @ fit.phi
    return expit(eta), n_clamped
