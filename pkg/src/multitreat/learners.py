"""Statistical learners used to model treatment assignment and outcomes.

All generalized-propensity-score learners expose ``predict_gps`` returning a
row-simplex :class:`~multitreat.data.GpsMatrix`; binary-outcome learners
expose ``predict_proba``.  Estimators here follow the scikit-learn convention
(constructor stores hyperparameters, ``fit`` returns self).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator
from sklearn.tree import DecisionTreeClassifier, DecisionTreeRegressor

from .data import GpsMatrix
from .validation import EstimationError, ValidationError, as_float_matrix, rng_from

_GPS_FLOOR = 1e-12


def _softmax_rows(eta):
    eta = eta - eta.max(axis=1, keepdims=True)
    e = np.exp(eta)
    p = e / e.sum(axis=1, keepdims=True)
    # numerical floor keeps rows strictly inside the simplex
    p = np.clip(p, _GPS_FLOOR, None)
    return p / p.sum(axis=1, keepdims=True)


def _one_hot(w, n_trt):
    out = np.zeros((len(w), n_trt))
    out[np.arange(len(w)), w - 1] = 1.0
    return out


class MultinomialLogit(BaseEstimator):
    """Multinomial logistic regression with the last treatment as baseline.

    Fit by Newton's method with step-halving on the ridge-penalized
    log-likelihood (intercepts unpenalized).  Convergence is declared when
    the largest absolute score entry drops below 1e-8; after 100 iterations
    the model is returned with ``converged_=False`` and a warning.

    Attributes
    ----------
    coef_ : ndarray of shape (T-1, p+1)
        Intercept-first rows of log-odds coefficients against the baseline.
    """

    def __init__(self, ridge=1e-8, max_iter=100, tol=1e-8):
        self.ridge = ridge
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, w):
        X = as_float_matrix(X, "X")
        w = np.asarray(w, dtype=np.int64).ravel()
        t = int(w.max())
        if t < 2:
            raise ValidationError("need at least two treatment classes")
        labels = np.unique(w)
        if not np.array_equal(labels, np.arange(1, t + 1)):
            raise ValidationError("treatment labels must be 1..T with every arm present")
        n, p = X.shape
        z = np.column_stack([np.ones(n), X])
        q = p + 1
        m = (t - 1) * q
        y = _one_hot(w, t)[:, : t - 1]

        pen = np.full(q, self.ridge)
        pen[0] = 0.0
        pen_full = np.tile(pen, t - 1)

        beta = np.zeros(m)
        self.converged_ = False
        for it in range(1, self.max_iter + 1):
            b = beta.reshape(t - 1, q)
            eta = np.column_stack([z @ b.T, np.zeros(n)])
            prob = _softmax_rows(eta)[:, : t - 1]
            score = (z.T @ (y - prob)).T.ravel() - pen_full * beta
            if np.max(np.abs(score)) < self.tol:
                self.converged_ = True
                break
            hess = np.zeros((m, m))
            for a in range(t - 1):
                for c in range(a, t - 1):
                    wt = prob[:, a] * ((a == c) - prob[:, c])
                    block = z.T @ (z * wt[:, None])
                    hess[a * q:(a + 1) * q, c * q:(c + 1) * q] = -block
                    if c != a:
                        hess[c * q:(c + 1) * q, a * q:(a + 1) * q] = -block
            hess[np.diag_indices(m)] -= pen_full
            step = np.linalg.solve(-hess, score)
            ll0 = self._penalized_loglik(beta, z, y, pen_full, n, t)
            scale = 1.0
            for _ in range(30):
                cand = beta + scale * step
                if self._penalized_loglik(cand, z, y, pen_full, n, t) >= ll0:
                    break
                scale *= 0.5
            beta = beta + scale * step
        else:
            warnings.warn("multinomial logit did not converge in "
                          f"{self.max_iter} iterations")
        if np.linalg.norm(beta) > 1e3:
            warnings.warn("very large coefficients; classes may be separated")
        self.coef_ = beta.reshape(t - 1, q)
        self.n_trt_ = t
        self.n_iter_ = it
        return self

    @staticmethod
    def _penalized_loglik(beta, z, y, pen_full, n, t):
        b = beta.reshape(t - 1, -1)
        eta = np.column_stack([z @ b.T, np.zeros(n)])
        eta -= eta.max(axis=1, keepdims=True)
        log_p = eta - np.log(np.exp(eta).sum(axis=1, keepdims=True))
        full_y = np.column_stack([y, 1 - y.sum(axis=1)])
        return float((full_y * log_p).sum() - 0.5 * np.sum(pen_full * beta ** 2))

    def predict_gps(self, X) -> GpsMatrix:
        X = as_float_matrix(X, "X")
        z = np.column_stack([np.ones(X.shape[0]), X])
        eta = np.column_stack([z @ self.coef_.T, np.zeros(X.shape[0])])
        return GpsMatrix(_softmax_rows(eta))


class BinaryLogit(BaseEstimator):
    """Plain or ridge logistic regression for a 0/1 target."""

    def __init__(self, ridge=1e-8):
        self.ridge = ridge

    def fit(self, X, y):
        w = np.where(np.asarray(y).ravel() == 1, 1, 2)
        self.model_ = MultinomialLogit(ridge=self.ridge).fit(X, w)
        return self

    def predict_proba(self, X):
        return self.model_.predict_gps(X).values[:, 0]


class BayesLogit(BaseEstimator):
    """Approximate-posterior logistic regression for outcome imputation.

    The MAP is found under independent Gaussian priors: scale ``prior_scale``
    on coefficients of inputs standardized to sd 0.5, scale
    ``intercept_scale`` on the intercept.  ``ndpost`` coefficient draws come
    from the Gaussian approximation N(MAP, H^-1) with H the penalized
    negative Hessian at the MAP.  Draws are mapped back to the original input
    scale.

    Attributes
    ----------
    center_ : ndarray of shape (q+1,)
        MAP on the original scale, intercept first.
    draws_ : ndarray of shape (ndpost, q+1)
        Posterior coefficient draws on the original scale.
    covariance_ : ndarray
        Exact original-scale covariance of the Gaussian approximation.
    """

    def __init__(self, ndpost=1000, prior_scale=2.5, intercept_scale=10.0,
                 max_iter=50, seed=None):
        self.ndpost = ndpost
        self.prior_scale = prior_scale
        self.intercept_scale = intercept_scale
        self.max_iter = max_iter
        self.seed = seed

    def fit(self, design, y):
        design = as_float_matrix(design, "design")
        y = np.asarray(y, dtype=float).ravel()
        if self.ndpost < 2:
            raise ValidationError("ndpost must be >= 2")
        n, q = design.shape

        mean = design.mean(axis=0)
        sd = design.std(axis=0)
        scale = np.where(sd > 0, 2.0 * sd, 1.0)
        z = np.column_stack([np.ones(n), (design - mean) / scale])

        prior_var = np.full(q + 1, self.prior_scale ** 2)
        prior_var[0] = self.intercept_scale ** 2
        lam = 1.0 / prior_var

        beta = np.zeros(q + 1)
        for _ in range(self.max_iter):
            p = expit(z @ beta)
            grad = z.T @ (y - p) - lam * beta
            if np.max(np.abs(grad)) < 1e-10:
                break
            wt = np.clip(p * (1 - p), 1e-10, None)
            hess = z.T @ (z * wt[:, None])
            hess[np.diag_indices(q + 1)] += lam
            step = np.linalg.solve(hess, grad)
            ll0 = self._penalized_loglik(beta, z, y, lam)
            sc = 1.0
            for _ in range(30):
                if self._penalized_loglik(beta + sc * step, z, y, lam) >= ll0:
                    break
                sc *= 0.5
            beta = beta + sc * step

        p = expit(z @ beta)
        wt = np.clip(p * (1 - p), 1e-10, None)
        hess = z.T @ (z * wt[:, None])
        hess[np.diag_indices(q + 1)] += lam
        try:
            chol = np.linalg.cholesky(hess)
        except np.linalg.LinAlgError:
            warnings.warn("singular posterior Hessian; adding ridge 1e-6")
            hess[np.diag_indices(q + 1)] += 1e-6
            chol = np.linalg.cholesky(hess)

        rng = rng_from(self.seed)
        zdraws = rng.standard_normal((q + 1, self.ndpost))
        std_draws = beta[:, None] + np.linalg.solve(chol.T, zdraws)
        std_draws = std_draws.T  # (ndpost, q+1)

        # map standardized-scale coefficients back to the original inputs:
        # eta = b0 + sum b_j (x_j - m_j)/s_j  =>  orig = amat @ standardized
        amat = np.zeros((q + 1, q + 1))
        amat[0, 0] = 1.0
        amat[0, 1:] = -mean / scale
        amat[1:, 1:] = np.diag(1.0 / scale)
        self.center_ = amat @ beta
        self.draws_ = std_draws @ amat.T
        cov_std = np.linalg.inv(hess)
        self.covariance_ = amat @ cov_std @ amat.T
        return self

    @staticmethod
    def _penalized_loglik(beta, z, y, lam):
        eta = z @ beta
        ll = np.sum(y * eta - np.logaddexp(0.0, eta))
        return float(ll - 0.5 * np.sum(lam * beta ** 2))

    def predict_proba_draws(self, design):
        """One predicted probability row per posterior draw, shape (M, n)."""
        design = as_float_matrix(design, "design")
        z = np.column_stack([np.ones(design.shape[0]), design])
        return expit(self.draws_ @ z.T)


class BoostedTrees(BaseEstimator):
    """Gradient-boosted multinomial trees with balance-based stopping.

    Boosts the multinomial deviance with depth-limited regression trees on
    the per-class gradient.  Every ``check_every`` rounds the covariate
    balance of the implied weights (max absolute standardized mean difference
    over covariates and treatment pairs) is recorded.  ``best_balance_`` is
    the exact minimum over checkpoints; ``n_trees_used_`` is the earliest
    checkpoint within ``balance_tol`` of it, so indistinguishable checkpoints
    resolve to the smallest model (in-sample balance keeps creeping down
    under overfitting even when treatment is pure noise).
    """

    def __init__(self, estimand="ATE", reference=None, n_trees_max=3000,
                 depth=3, shrinkage=0.01, check_every=100, balance_tol=0.02,
                 seed=None):
        self.estimand = estimand
        self.reference = reference
        self.n_trees_max = n_trees_max
        self.depth = depth
        self.shrinkage = shrinkage
        self.check_every = check_every
        self.balance_tol = balance_tol
        self.seed = seed

    def fit(self, X, w):
        if self.n_trees_max < self.check_every:
            raise ValidationError("n_trees_max must be >= check_every")
        X = as_float_matrix(X, "X")
        w = np.asarray(w, dtype=np.int64).ravel()
        t = int(w.max())
        n = X.shape[0]
        y = _one_hot(w, t)
        counts = y.sum(axis=0)
        if np.any(counts == 0):
            raise ValidationError("every treatment arm needs at least one unit")
        self.init_score_ = np.log(counts / n)
        rng = rng_from(self.seed)
        tree_seed = int(rng.integers(2 ** 31 - 1))

        f = np.tile(self.init_score_, (n, 1))
        self.trees_ = []
        self.balance_trace_ = []
        for m in range(1, self.n_trees_max + 1):
            p = _softmax_rows(f)
            round_trees = []
            for cls in range(t):
                resid = y[:, cls] - p[:, cls]
                tree = DecisionTreeRegressor(max_depth=self.depth,
                                             random_state=tree_seed)
                tree.fit(X, resid)
                leaves = tree.apply(X)
                gamma = self._leaf_values(leaves, resid, t)
                f[:, cls] += self.shrinkage * gamma[leaves]
                round_trees.append((tree, gamma))
            self.trees_.append(round_trees)
            if m % self.check_every == 0:
                gps = _softmax_rows(f)
                bal = balance_statistic(X, w, gps, self.estimand, self.reference)
                self.balance_trace_.append((m, float(bal)))

        self.best_balance_ = min(bal for _, bal in self.balance_trace_)
        self.n_trees_used_ = next(
            step for step, bal in self.balance_trace_
            if bal <= self.best_balance_ + self.balance_tol)
        self.n_trt_ = t
        return self

    @staticmethod
    def _leaf_values(leaves, resid, n_classes):
        size = leaves.max() + 1
        num = np.bincount(leaves, weights=resid, minlength=size)
        den = np.bincount(leaves, weights=np.abs(resid) * (1 - np.abs(resid)),
                          minlength=size)
        gamma = np.zeros(size)
        ok = den > 1e-12
        gamma[ok] = (n_classes - 1) / n_classes * num[ok] / den[ok]
        return gamma

    def decision_scores(self, X, n_rounds=None):
        X = as_float_matrix(X, "X")
        n_rounds = self.n_trees_used_ if n_rounds is None else n_rounds
        f = np.tile(self.init_score_, (X.shape[0], 1))
        for round_trees in self.trees_[:n_rounds]:
            for cls, (tree, gamma) in enumerate(round_trees):
                f[:, cls] += self.shrinkage * gamma[tree.apply(X)]
        return f

    def predict_gps(self, X) -> GpsMatrix:
        return GpsMatrix(_softmax_rows(self.decision_scores(X)))


def balance_statistic(X, w, gps, estimand="ATE", reference=None):
    """Max absolute standardized mean difference under the implied weights.

    ATE uses weights 1/GPS of the received arm and the full-sample sd as the
    standardizer; ATT uses weight 1 in the reference arm, the GPS ratio
    elsewhere, and the reference-arm sd.
    """
    X = as_float_matrix(X, "X")
    w = np.asarray(w, dtype=np.int64).ravel()
    t = gps.shape[1]
    gps = np.clip(gps, _GPS_FLOOR, None)
    own = gps[np.arange(len(w)), w - 1]
    if estimand == "ATE":
        weights = 1.0 / own
        pairs = [(a, b) for a in range(1, t + 1) for b in range(a + 1, t + 1)]
        sd = X.std(axis=0)
    else:
        if reference is None:
            raise ValidationError("ATT balance needs a reference arm")
        weights = np.where(w == reference, 1.0, gps[:, reference - 1] / own)
        pairs = [(reference, b) for b in range(1, t + 1) if b != reference]
        sd = X[w == reference].std(axis=0)

    means = {}
    for g in range(1, t + 1):
        mask = w == g
        wt = weights[mask]
        means[g] = (X[mask] * wt[:, None]).sum(axis=0) / wt.sum()
    usable = sd > 0
    if not np.any(usable):
        return 0.0
    worst = 0.0
    for a, b in pairs:
        smd = np.abs(means[a] - means[b])[usable] / sd[usable]
        worst = max(worst, float(smd.max()))
    return worst


_STACK_LIBRARY = ("logit", "ridge-logit", "tree")


def _make_learner(name, seed):
    if name == "logit":
        return BinaryLogit(ridge=1e-8)
    if name == "ridge-logit":
        return BinaryLogit(ridge=1.0)
    if name == "tree":
        return _TreeLearner(seed=seed)
    if name == "intercept":
        return _InterceptLearner()
    raise ValidationError(f"unknown learner {name!r}; library is {_STACK_LIBRARY}")


class _InterceptLearner(BaseEstimator):
    """Predicts the overall outcome rate, ignoring every feature."""

    def fit(self, X, y):
        self.rate_ = float(np.mean(y))
        return self

    def predict_proba(self, X):
        return np.full(np.asarray(X).shape[0], self.rate_)


class _TreeLearner(BaseEstimator):
    def __init__(self, seed=None):
        self.seed = seed

    def fit(self, X, y):
        self.model_ = DecisionTreeClassifier(min_samples_split=20,
                                             random_state=self.seed)
        self.model_.fit(X, y)
        return self

    def predict_proba(self, X):
        prob = self.model_.predict_proba(X)
        classes = list(self.model_.classes_)
        if 1 not in classes:
            return np.zeros(X.shape[0])
        return prob[:, classes.index(1)]


def _project_simplex(v):
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    rho = np.flatnonzero(u + (1 - css) / np.arange(1, len(v) + 1) > 0)[-1]
    theta = (css[rho] - 1) / (rho + 1)
    return np.maximum(v - theta, 0.0)


class StackedEnsemble(BaseEstimator):
    """Cross-validated stacking of binary probability learners.

    Out-of-fold predictions feed a simplex-constrained least-squares weight
    search (projected gradient, 500 iterations, step 1/L with L the gradient
    Lipschitz constant); the simplex vertices are always candidates, so the
    stack is never worse than the best single learner in CV error.  Base
    learners are refit on the full data for prediction.  A learner that
    raises during cross-validation is dropped with a warning.
    """

    def __init__(self, library=("logit", "ridge-logit", "tree"), folds=5,
                 seed=None):
        self.library = library
        self.folds = folds
        self.seed = seed

    def fit(self, X, y):
        X = as_float_matrix(X, "X")
        y = np.asarray(y, dtype=float).ravel()
        if self.folds < 2:
            raise ValidationError("folds must be >= 2")
        if len(self.library) == 0:
            raise ValidationError("stacking library is empty")
        for name in self.library:
            _make_learner(name, 0)
        n = X.shape[0]
        rng = rng_from(self.seed)
        fold_of = np.empty(n, dtype=int)
        fold_of[rng.permutation(n)] = np.arange(n) % self.folds
        learner_seed = int(rng.integers(2 ** 31 - 1))

        oof, kept = [], []
        for name in self.library:
            pred = np.empty(n)
            try:
                for k in range(self.folds):
                    test = fold_of == k
                    model = _make_learner(name, learner_seed)
                    model.fit(X[~test], y[~test])
                    pred[test] = model.predict_proba(X[test])
            except Exception as exc:  # noqa: BLE001 - any learner failure drops it
                warnings.warn(f"stacking learner {name!r} failed and was dropped: {exc}")
                continue
            oof.append(pred)
            kept.append(name)
        if not kept:
            raise EstimationError("all stacking learners failed")

        z = np.column_stack(oof)
        weights = self._solve_weights(z, y)
        self.learner_names_ = kept
        self.weights_ = weights
        self.cv_error_ = float(np.mean((y - z @ weights) ** 2))
        self.cv_errors_single_ = np.mean((y[:, None] - z) ** 2, axis=0)
        self.models_ = [_make_learner(name, learner_seed).fit(X, y) for name in kept]
        return self

    @staticmethod
    def _solve_weights(z, y):
        n, L = z.shape
        w = np.full(L, 1.0 / L)
        gram = z.T @ z
        lip = 2.0 * float(np.linalg.eigvalsh(gram).max())
        if lip <= 0:
            lip = 1.0
        zty = z.T @ y
        for _ in range(500):
            grad = 2.0 * (gram @ w - zty)
            w = _project_simplex(w - grad / lip)

        def err(v):
            return float(np.sum((y - z @ v) ** 2))

        best_w, best_e = w, err(w)
        for l in range(L):
            e = np.zeros(L)
            e[l] = 1.0
            if err(e) < best_e:
                best_w, best_e = e, err(e)
        return best_w

    def predict_proba(self, X):
        X = as_float_matrix(X, "X")
        pred = np.column_stack([m.predict_proba(X) for m in self.models_])
        return pred @ self.weights_


class StackedGps(BaseEstimator):
    """Multinomial GPS by one-vs-baseline composition of binary stacks.

    For each non-baseline arm t a binary ensemble models P(W = t | W in
    {t, T}); predicted conditional odds are renormalized against the baseline
    to produce a simplex row per unit.
    """

    def __init__(self, library=("logit", "ridge-logit", "tree"), folds=5,
                 seed=None):
        self.library = library
        self.folds = folds
        self.seed = seed

    def fit(self, X, w):
        X = as_float_matrix(X, "X")
        w = np.asarray(w, dtype=np.int64).ravel()
        t = int(w.max())
        self.n_trt_ = t
        self.components_ = []
        for arm in range(1, t):
            mask = (w == arm) | (w == t)
            ens = StackedEnsemble(library=self.library, folds=self.folds,
                                  seed=None if self.seed is None else self.seed + arm)
            ens.fit(X[mask], (w[mask] == arm).astype(float))
            self.components_.append(ens)
        return self

    def predict_gps(self, X) -> GpsMatrix:
        X = as_float_matrix(X, "X")
        odds = np.ones((X.shape[0], self.n_trt_))
        for arm, ens in enumerate(self.components_):
            q = np.clip(ens.predict_proba(X), 1e-9, 1 - 1e-9)
            odds[:, arm] = q / (1 - q)
        return GpsMatrix(odds / odds.sum(axis=1, keepdims=True))


@dataclass
class KMeansModel:
    centers: np.ndarray      # ascending
    assignments: np.ndarray  # index into centers
    inertia: float


def kmeans_1d(points, k, seed=None, restarts=10) -> KMeansModel:
    """Lloyd's algorithm on a 1-d array, best of ``restarts`` by within-SS.

    Initial centers are sampled without replacement from the distinct values,
    so ``k`` may not exceed the number of distinct points.  Deterministic for
    a fixed seed.
    """
    points = np.asarray(points, dtype=float).ravel()
    distinct = np.unique(points)
    if k < 1:
        raise ValidationError("k must be >= 1")
    if k > distinct.size:
        raise ValidationError(
            f"k = {k} exceeds the {distinct.size} distinct point value(s)")

    best = None
    for r in range(restarts):
        rng = rng_from((0 if seed is None else seed, r))
        centers = np.sort(rng.choice(distinct, size=k, replace=False))
        for _ in range(300):
            assign = np.argmin(np.abs(points[:, None] - centers[None, :]), axis=1)
            new_centers = centers.copy()
            for j in range(k):
                sel = assign == j
                if np.any(sel):
                    new_centers[j] = points[sel].mean()
                else:
                    worst = np.argmax(np.abs(points - centers[assign]))
                    new_centers[j] = points[worst]
            if np.allclose(new_centers, centers, rtol=0, atol=1e-12):
                centers = new_centers
                break
            centers = new_centers
        assign = np.argmin(np.abs(points[:, None] - centers[None, :]), axis=1)
        inertia = float(np.sum((points - centers[assign]) ** 2))
        if best is None or inertia < best.inertia - 1e-12:
            order = np.argsort(centers, kind="stable")
            relabel = np.empty(k, dtype=int)
            relabel[order] = np.arange(k)
            best = KMeansModel(centers=centers[order],
                               assignments=relabel[assign],
                               inertia=inertia)
    return best
