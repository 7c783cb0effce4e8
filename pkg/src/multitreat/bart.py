"""Bayesian additive regression trees: probit, continuous, and GPS variants.

One MCMC chain is strictly sequential.  A sweep draws the latent response
(probit) or error variance (continuous), then updates each tree by a
Metropolis-Hastings move over {grow, prune, change, swap} with conjugate
leaf-mean redraws.  Split rules are chosen uniformly over the cutpoints that
keep both children non-empty on the training rows, so every kept tree is
structurally valid by construction.

Cutpoints are a fixed grid of 100 uniform points per covariate range.
Trees serialize to a versioned text format (split var, cutpoint index, leaf
value per node) for out-of-sample prediction reuse.
"""
from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import chi2

from .data import GpsMatrix, PosteriorDraws
from .validation import ValidationError, as_float_matrix, rng_from

_N_CUTPOINTS = 100
_FORMAT_TAG = "multitreat-bart/1"


@dataclass
class BartPriors:
    """Hyperparameters shared by all variants.

    ``n_trees=None`` resolves to the variant default: 50 for probit,
    200 for continuous.
    """

    n_trees: int | None = None
    base: float = 0.95          # split probability alpha
    power: float = 2.0          # split probability depth decay
    k: float = 2.0              # leaf prior shrinkage
    sigma_df: float = 3.0       # continuous error-variance prior df
    sigma_quant: float = 0.9    # prior mass below the data sd
    p_grow: float = 0.25
    p_prune: float = 0.25
    p_change: float = 0.40
    p_swap: float = 0.10

    def __post_init__(self):
        mix = self.p_grow + self.p_prune + self.p_change + self.p_swap
        if abs(mix - 1.0) > 1e-9:
            raise ValidationError("proposal probabilities must sum to 1")
        if self.n_trees is not None and self.n_trees < 1:
            raise ValidationError("n_trees must be >= 1")
        if not (0 < self.base < 1) or self.power < 0 or self.k <= 0:
            raise ValidationError("invalid tree prior parameters")

    def resolve_trees(self, variant: str) -> int:
        if self.n_trees is not None:
            return self.n_trees
        return 50 if variant == "probit" else 200


class _Node:
    __slots__ = ("leaf", "var", "cut", "value", "rows")

    def __init__(self, rows):
        self.leaf = True
        self.var = -1
        self.cut = -1
        self.value = 0.0
        self.rows = rows


def _depth(node_id: int) -> int:
    return (node_id + 1).bit_length() - 1


class _Tree:
    """One regression tree, nodes in heap order (children of i: 2i+1, 2i+2)."""

    def __init__(self, n: int):
        self.nodes = {0: _Node(np.arange(n))}

    def leaves(self):
        return [i for i, nd in self.nodes.items() if nd.leaf]

    def nogs(self):
        out = []
        for i, nd in self.nodes.items():
            if not nd.leaf:
                if self.nodes[2 * i + 1].leaf and self.nodes[2 * i + 2].leaf:
                    out.append(i)
        return out

    def swap_pairs(self):
        out = []
        for i, nd in self.nodes.items():
            if nd.leaf:
                continue
            for c in (2 * i + 1, 2 * i + 2):
                if not self.nodes[c].leaf:
                    out.append((i, c))
        return out

    def subtree_rows(self, node_id):
        rows, stack = [], [node_id]
        while stack:
            i = stack.pop()
            nd = self.nodes[i]
            if nd.leaf:
                rows.append(nd.rows)
            else:
                stack.extend((2 * i + 1, 2 * i + 2))
        return np.concatenate(rows)

    def snapshot(self):
        out = {}
        for i, nd in self.nodes.items():
            out[i] = (nd.var, nd.cut) if not nd.leaf else nd.value
        return out


class _Chain:
    """Backfitting sampler over a sum of trees on a latent/continuous target."""

    def __init__(self, X, priors: BartPriors, variant: str, rng):
        self.X = X
        self.n, self.p = X.shape
        self.priors = priors
        self.rng = rng
        self.J = priors.resolve_trees(variant)
        lo, hi = X.min(axis=0), X.max(axis=0)
        self.grids = [np.linspace(lo[v], hi[v], _N_CUTPOINTS + 2)[1:-1]
                      if hi[v] > lo[v] else np.empty(0) for v in range(self.p)]
        self.trees = [_Tree(self.n) for _ in range(self.J)]
        self.g = np.zeros((self.J, self.n))
        self.fhat = np.zeros(self.n)
        if variant == "probit":
            self.sigma_mu = 3.0 / (priors.k * np.sqrt(self.J))
        else:
            self.sigma_mu = 0.5 / (priors.k * np.sqrt(self.J))

    # -- split bookkeeping ------------------------------------------------
    def _valid_cut_range(self, rows, var):
        grid = self.grids[var]
        if grid.size == 0:
            return 0, 0
        col = self.X[rows, var]
        lo = np.searchsorted(grid, col.min(), side="left")
        hi = np.searchsorted(grid, col.max(), side="left")
        return lo, hi

    def _split_prob(self, depth):
        return self.priors.base / (1.0 + depth) ** self.priors.power

    def _log_ml_leaf(self, resid_sum, m, sigma2):
        denom = sigma2 + m * self.sigma_mu ** 2
        return (0.5 * np.log(sigma2 / denom)
                + self.sigma_mu ** 2 * resid_sum ** 2 / (2.0 * sigma2 * denom))

    def _leaf_ml(self, resid, rows, sigma2):
        return self._log_ml_leaf(float(resid[rows].sum()), rows.size, sigma2)

    # -- Metropolis-Hastings moves ----------------------------------------
    def _update_tree(self, tree: _Tree, resid, sigma2):
        u = self.rng.random()
        pr = self.priors
        if u < pr.p_grow:
            self._grow(tree, resid, sigma2)
        elif u < pr.p_grow + pr.p_prune:
            self._prune(tree, resid, sigma2)
        elif u < pr.p_grow + pr.p_prune + pr.p_change:
            self._change(tree, resid, sigma2)
        else:
            self._swap(tree, resid, sigma2)
        self._draw_leaf_values(tree, resid, sigma2)

    def _grow(self, tree, resid, sigma2):
        leaves = tree.leaves()
        leaf_id = leaves[self.rng.integers(len(leaves))]
        nd = tree.nodes[leaf_id]
        var = int(self.rng.integers(self.p))
        lo, hi = self._valid_cut_range(nd.rows, var)
        if hi <= lo:
            return
        nv = hi - lo
        cut = int(lo + self.rng.integers(nv))
        cval = self.grids[var][cut]
        mask = self.X[nd.rows, var] <= cval
        left_rows, right_rows = nd.rows[mask], nd.rows[~mask]

        d = _depth(leaf_id)
        ml_diff = (self._leaf_ml(resid, left_rows, sigma2)
                   + self._leaf_ml(resid, right_rows, sigma2)
                   - self._leaf_ml(resid, nd.rows, sigma2))
        ps, ps_child = self._split_prob(d), self._split_prob(d + 1)
        log_prior = (np.log(ps) + 2.0 * np.log1p(-ps_child) - np.log1p(-ps)
                     - np.log(self.p) - np.log(nv))
        parent = (leaf_id - 1) // 2
        nogs_now = tree.nogs()
        n_nog_after = len(nogs_now) + 1 - (leaf_id > 0 and parent in nogs_now)
        log_fwd = np.log(self.priors.p_grow) - np.log(len(leaves)) \
            - np.log(self.p) - np.log(nv)
        log_bwd = np.log(self.priors.p_prune) - np.log(n_nog_after)
        if np.log(self.rng.random()) < ml_diff + log_prior + log_bwd - log_fwd:
            nd.leaf = False
            nd.var, nd.cut = var, cut
            tree.nodes[2 * leaf_id + 1] = _Node(left_rows)
            tree.nodes[2 * leaf_id + 2] = _Node(right_rows)
            nd.rows = None

    def _prune(self, tree, resid, sigma2):
        nogs = tree.nogs()
        if not nogs:
            return
        node_id = nogs[self.rng.integers(len(nogs))]
        nd = tree.nodes[node_id]
        left, right = tree.nodes[2 * node_id + 1], tree.nodes[2 * node_id + 2]
        merged = np.concatenate([left.rows, right.rows])

        d = _depth(node_id)
        ml_diff = (self._leaf_ml(resid, merged, sigma2)
                   - self._leaf_ml(resid, left.rows, sigma2)
                   - self._leaf_ml(resid, right.rows, sigma2))
        lo, hi = self._valid_cut_range(merged, nd.var)
        nv = max(hi - lo, 1)
        ps, ps_child = self._split_prob(d), self._split_prob(d + 1)
        log_prior = -(np.log(ps) + 2.0 * np.log1p(-ps_child) - np.log1p(-ps)
                      - np.log(self.p) - np.log(nv))
        n_leaves_after = len(tree.leaves()) - 1
        log_fwd = np.log(self.priors.p_prune) - np.log(len(nogs))
        log_bwd = np.log(self.priors.p_grow) - np.log(n_leaves_after) \
            - np.log(self.p) - np.log(nv)
        if np.log(self.rng.random()) < ml_diff + log_prior + log_bwd - log_fwd:
            merged.sort()
            nd.leaf = True
            nd.rows = merged
            nd.var = nd.cut = -1
            del tree.nodes[2 * node_id + 1], tree.nodes[2 * node_id + 2]

    def _change(self, tree, resid, sigma2):
        nogs = tree.nogs()
        if not nogs:
            return
        node_id = nogs[self.rng.integers(len(nogs))]
        nd = tree.nodes[node_id]
        left, right = tree.nodes[2 * node_id + 1], tree.nodes[2 * node_id + 2]
        rows = np.concatenate([left.rows, right.rows])
        var = int(self.rng.integers(self.p))
        lo, hi = self._valid_cut_range(rows, var)
        if hi <= lo:
            return
        cut = int(lo + self.rng.integers(hi - lo))
        cval = self.grids[var][cut]
        mask = self.X[rows, var] <= cval
        new_left, new_right = rows[mask], rows[~mask]
        # uniform rule prior cancels the symmetric proposal: ratio is ML only
        ml_diff = (self._leaf_ml(resid, new_left, sigma2)
                   + self._leaf_ml(resid, new_right, sigma2)
                   - self._leaf_ml(resid, left.rows, sigma2)
                   - self._leaf_ml(resid, right.rows, sigma2))
        if np.log(self.rng.random()) < ml_diff:
            nd.var, nd.cut = var, cut
            left.rows, right.rows = new_left, new_right

    def _swap(self, tree, resid, sigma2):
        pairs = tree.swap_pairs()
        if not pairs:
            return
        parent_id, child_id = pairs[self.rng.integers(len(pairs))]
        parent, child = tree.nodes[parent_id], tree.nodes[child_id]
        old_state = self._subtree_state(tree, parent_id)
        old_score = (self._subtree_ml(tree, parent_id, resid, sigma2)
                     + self._subtree_rule_logprior(tree, parent_id))
        parent.var, parent.cut, child.var, child.cut = \
            child.var, child.cut, parent.var, parent.cut
        if not self._repartition(tree, parent_id, old_state["rows"]):
            self._restore_subtree(tree, old_state)
            return
        new_score = (self._subtree_ml(tree, parent_id, resid, sigma2)
                     + self._subtree_rule_logprior(tree, parent_id))
        if np.log(self.rng.random()) < new_score - old_score:
            return
        self._restore_subtree(tree, old_state)

    # -- subtree helpers (swap support) ------------------------------------
    def _subtree_ids(self, tree, node_id):
        out, stack = [], [node_id]
        while stack:
            i = stack.pop()
            out.append(i)
            if not tree.nodes[i].leaf:
                stack.extend((2 * i + 1, 2 * i + 2))
        return out

    def _subtree_state(self, tree, node_id):
        state = {"ids": {}, "rows": tree.subtree_rows(node_id)}
        for i in self._subtree_ids(tree, node_id):
            nd = tree.nodes[i]
            state["ids"][i] = (nd.leaf, nd.var, nd.cut, nd.value,
                               None if nd.rows is None else nd.rows.copy())
        return state

    def _restore_subtree(self, tree, state):
        for i, (leaf, var, cut, value, rows) in state["ids"].items():
            nd = tree.nodes[i]
            nd.leaf, nd.var, nd.cut, nd.value, nd.rows = leaf, var, cut, value, rows

    def _repartition(self, tree, node_id, rows):
        """Re-route ``rows`` down the subtree; False if any leaf empties."""
        nd = tree.nodes[node_id]
        if nd.leaf:
            if rows.size == 0:
                return False
            nd.rows = rows
            return True
        if rows.size == 0:
            return False
        cval = self.grids[nd.var][nd.cut]
        mask = self.X[rows, nd.var] <= cval
        return (self._repartition(tree, 2 * node_id + 1, rows[mask])
                and self._repartition(tree, 2 * node_id + 2, rows[~mask]))

    def _subtree_ml(self, tree, node_id, resid, sigma2):
        return sum(self._leaf_ml(resid, tree.nodes[i].rows, sigma2)
                   for i in self._subtree_ids(tree, node_id)
                   if tree.nodes[i].leaf)

    def _subtree_rule_logprior(self, tree, node_id):
        total = 0.0
        for i in self._subtree_ids(tree, node_id):
            nd = tree.nodes[i]
            if nd.leaf:
                continue
            rows = tree.subtree_rows(i)
            lo, hi = self._valid_cut_range(rows, nd.var)
            total -= np.log(self.p) + np.log(max(hi - lo, 1))
        return total

    # -- leaf values and sweeps --------------------------------------------
    def _draw_leaf_values(self, tree, resid, sigma2):
        for i in tree.leaves():
            nd = tree.nodes[i]
            m = nd.rows.size
            denom = sigma2 + m * self.sigma_mu ** 2
            mean = self.sigma_mu ** 2 * float(resid[nd.rows].sum()) / denom
            sd = np.sqrt(sigma2 * self.sigma_mu ** 2 / denom)
            nd.value = mean + sd * self.rng.standard_normal()

    def sweep_trees(self, target, sigma2):
        for j, tree in enumerate(self.trees):
            resid = target - self.fhat + self.g[j]
            self._update_tree(tree, resid, sigma2)
            g_new = np.zeros(self.n)
            for i in tree.leaves():
                nd = tree.nodes[i]
                g_new[nd.rows] = nd.value
            self.fhat += g_new - self.g[j]
            self.g[j] = g_new

    def insample_f(self):
        f = np.zeros(self.n)
        for j in range(self.J):
            f += self.g[j]
        return f

    def snapshot_trees(self):
        return [tree.snapshot() for tree in self.trees]


def _eval_trees(tree_list, grids, X):
    f = np.zeros(X.shape[0])
    for nodes in tree_list:
        idx_stack = [(0, np.arange(X.shape[0]))]
        while idx_stack:
            node_id, rows = idx_stack.pop()
            spec = nodes[node_id]
            if isinstance(spec, tuple):
                var, cut = spec
                mask = X[rows, var] <= grids[var][cut]
                idx_stack.append((2 * node_id + 1, rows[mask]))
                idx_stack.append((2 * node_id + 2, rows[~mask]))
            else:
                f[rows] += spec
    return f


@dataclass
class _BartFitBase:
    variant: str
    offset: float
    grids: list
    n_covariates: int
    draws_f: np.ndarray          # (M, n_train) latent/scaled function draws
    tree_draws: list             # M snapshots, each J dicts
    burn: int

    @property
    def ndpost(self) -> int:
        return self.draws_f.shape[0]

    def _predict_f(self, X_new):
        X_new = as_float_matrix(X_new, "X_new")
        if X_new.shape[1] != self.n_covariates:
            raise ValidationError(
                f"X_new has {X_new.shape[1]} columns; model was trained "
                f"with {self.n_covariates}")
        out = np.empty((self.ndpost, X_new.shape[0]))
        for m, trees in enumerate(self.tree_draws):
            f = np.full(X_new.shape[0], self.offset)
            f += _eval_trees(trees, self.grids, X_new)
            out[m] = f
        return out

    # -- text serialization -------------------------------------------------
    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"{_FORMAT_TAG}\n")
        buf.write(f"variant {self.variant}\n")
        buf.write(f"offset {self.offset!r}\n")
        buf.write(f"ncov {self.n_covariates}\n")
        for grid in self.grids:
            buf.write("grid " + " ".join(repr(float(v)) for v in grid) + "\n")
        self._write_extra(buf)
        buf.write(f"draws {self.ndpost}\n")
        for m, trees in enumerate(self.tree_draws):
            buf.write(f"draw {m} {len(trees)}\n")
            for nodes in trees:
                parts = []
                for node_id in sorted(nodes):
                    spec = nodes[node_id]
                    if isinstance(spec, tuple):
                        parts.append(f"{node_id}:s:{spec[0]}:{spec[1]}")
                    else:
                        parts.append(f"{node_id}:l:{float(spec)!r}")
                buf.write(" ".join(parts) + "\n")
        return buf.getvalue()

    def _write_extra(self, buf):
        pass


@dataclass
class ProbitBartFit(_BartFitBase):
    """Posterior of a probit sum-of-trees model."""

    def predict(self, X_new) -> PosteriorDraws:
        return PosteriorDraws(ndtr(self._predict_f(X_new)))

    @property
    def insample_probabilities(self) -> np.ndarray:
        return ndtr(self.draws_f)


@dataclass
class ContinuousBartFit(_BartFitBase):
    y_min: float = 0.0
    y_range: float = 1.0
    draws_sigma: np.ndarray = field(default_factory=lambda: np.empty(0))

    def _unscale(self, f):
        return (f + 0.5) * self.y_range + self.y_min

    def predict(self, X_new) -> np.ndarray:
        """Function draws on the original outcome scale, shape (M, n_new)."""
        return self._unscale(self._predict_f(X_new))

    @property
    def insample_values(self) -> np.ndarray:
        return self._unscale(self.draws_f)

    def _write_extra(self, buf):
        buf.write(f"scale {self.y_min!r} {self.y_range!r}\n")
        buf.write("sigma " + " ".join(repr(float(v)) for v in self.draws_sigma) + "\n")


def fit_probit_bart(X, y, ndpost=1000, burn=100, priors=None, seed=None) -> ProbitBartFit:
    """Probit BART by Albert-Chib data augmentation.

    ``X`` should already contain any treatment encoding the caller wants the
    trees to see.  Latent normals are drawn from their truncated conditionals
    each sweep; the leaf prior sd is 3/(k sqrt(J)) on the latent scale.
    """
    X = as_float_matrix(X, "X")
    y = np.asarray(y, dtype=float).ravel()
    if ndpost < 10:
        raise ValidationError("ndpost must be >= 10")
    if set(np.unique(y)) - {0.0, 1.0}:
        raise ValidationError("probit outcome must be binary 0/1")
    priors = priors or BartPriors()
    rng = rng_from(seed)
    n = X.shape[0]
    chain = _Chain(X, priors, "probit", rng)
    ybar = min(max(y.mean(), 1.0 / (n + 1)), n / (n + 1.0))
    offset = float(ndtri(ybar))

    draws_f = np.empty((ndpost, n))
    tree_draws = []
    kept = 0
    for sweep in range(burn + ndpost):
        center = chain.fhat + offset
        u = rng.random(n)
        a = ndtr(-center)
        q = np.where(y == 1, a + u * (1 - a), u * a)
        z = center + ndtri(np.clip(q, 1e-12, 1 - 1e-12))
        chain.sweep_trees(z - offset, 1.0)
        if sweep >= burn:
            draws_f[kept] = offset + chain.insample_f()
            tree_draws.append(chain.snapshot_trees())
            kept += 1
    return ProbitBartFit(variant="probit", offset=offset, grids=chain.grids,
                         n_covariates=X.shape[1], draws_f=draws_f,
                         tree_draws=tree_draws, burn=burn)


def predict_probit(fit: ProbitBartFit, X_new) -> PosteriorDraws:
    return fit.predict(X_new)


def fit_continuous_bart(X, y_cont, ndpost=1000, burn=100, priors=None,
                        seed=None) -> ContinuousBartFit:
    """Continuous BART; the outcome is internally mapped to [-0.5, 0.5].

    The error variance follows an inverse-chi-squared prior (df
    ``priors.sigma_df``) calibrated so the data sd sits at prior quantile
    ``priors.sigma_quant``, and is redrawn from its conditional each sweep.
    A zero-variance outcome short-circuits to a constant fit with sigma 0.
    """
    X = as_float_matrix(X, "X")
    y = np.asarray(y_cont, dtype=float).ravel()
    if ndpost < 10:
        raise ValidationError("ndpost must be >= 10")
    priors = priors or BartPriors()
    rng = rng_from(seed)
    n = X.shape[0]
    y_min, y_max = float(y.min()), float(y.max())
    if y_max == y_min:
        grids = _Chain(X, priors, "continuous", rng).grids
        flat = [{0: 0.0} for _ in range(priors.resolve_trees("continuous"))]
        # _unscale(0) must reproduce the constant outcome
        return ContinuousBartFit(
            variant="continuous", offset=0.0, grids=grids,
            n_covariates=X.shape[1], draws_f=np.zeros((ndpost, n)),
            tree_draws=[flat] * ndpost, burn=burn,
            y_min=y_min - 0.5, y_range=1.0, draws_sigma=np.zeros(ndpost))
    y_range = y_max - y_min
    ys = (y - y_min) / y_range - 0.5

    chain = _Chain(X, priors, "continuous", rng)
    nu = priors.sigma_df
    sd_hat = float(ys.std())
    lam = sd_hat ** 2 * chi2.ppf(1.0 - priors.sigma_quant, nu) / nu
    sigma2 = sd_hat ** 2

    draws_f = np.empty((ndpost, n))
    draws_sigma = np.empty(ndpost)
    tree_draws = []
    kept = 0
    for sweep in range(burn + ndpost):
        chain.sweep_trees(ys, sigma2)
        ssr = float(np.sum((ys - chain.fhat) ** 2))
        sigma2 = (nu * lam + ssr) / rng.chisquare(nu + n)
        if sweep >= burn:
            draws_f[kept] = chain.insample_f()
            draws_sigma[kept] = np.sqrt(sigma2) * y_range
            tree_draws.append(chain.snapshot_trees())
            kept += 1
    return ContinuousBartFit(variant="continuous", offset=0.0,
                             grids=chain.grids, n_covariates=X.shape[1],
                             draws_f=draws_f, tree_draws=tree_draws, burn=burn,
                             y_min=y_min, y_range=y_range,
                             draws_sigma=draws_sigma)


@dataclass
class MultinomialBartGps:
    """Posterior GPS draws, shape (M1, T, n)."""

    gps_draws: np.ndarray

    def __post_init__(self):
        if self.gps_draws.ndim != 3:
            raise ValidationError("gps_draws must be (M1, T, n)")
        sums = self.gps_draws.sum(axis=1)
        if np.any(self.gps_draws <= 0) or np.max(np.abs(sums - 1.0)) > 1e-8:
            raise ValidationError("each (draw, unit) slice must be on the simplex")

    @property
    def m1(self):
        return self.gps_draws.shape[0]

    def mean_gps(self) -> GpsMatrix:
        return GpsMatrix(self.gps_draws.mean(axis=0).T)

    def draw(self, m) -> np.ndarray:
        """GPS draw m as a (T, n) array."""
        return self.gps_draws[m]


def fit_multinomial_bart_gps(X, w, M1, gap=10, burn=100, priors=None,
                             seed=None) -> MultinomialBartGps:
    """GPS posterior by stick-breaking conditional probit BART fits.

    Component t models P(W = t | W >= t, X) on the units not yet assigned to
    an earlier arm; components run as independent chains thinned every
    ``gap`` sweeps, and draws compose into simplex rows.
    """
    X = as_float_matrix(X, "X")
    w = np.asarray(w, dtype=np.int64).ravel()
    if M1 < 1 or gap < 1:
        raise ValidationError("M1 and gap must be >= 1")
    t = int(w.max())
    counts = np.bincount(w, minlength=t + 1)[1:]
    if np.any(counts == 0):
        raise ValidationError("treatment labels must be 1..T with every arm present")
    if np.any(counts < 5):
        small = [str(a + 1) for a in range(t) if counts[a] < 5]
        warnings.warn("arm(s) " + ", ".join(small) +
                      " have fewer than 5 units; conditional GPS fit unstable")
    priors = priors or BartPriors()
    n = X.shape[0]
    seq = np.random.SeedSequence(_seed_entropy(seed))
    comp_seeds = seq.spawn(t - 1)

    cond = np.empty((t - 1, M1, n))
    for arm in range(1, t):
        mask = w >= arm
        target = (w[mask] == arm).astype(float)
        comp = _probit_thinned(X[mask], target, X, M1, gap, burn, priors,
                               np.random.default_rng(comp_seeds[arm - 1]))
        cond[arm - 1] = comp

    gps = np.empty((M1, t, n))
    remaining = np.ones((M1, n))
    for arm in range(t - 1):
        gps[:, arm, :] = remaining * cond[arm]
        remaining = remaining * (1.0 - cond[arm])
    gps[:, t - 1, :] = remaining
    gps = np.clip(gps, 1e-12, None)
    gps /= gps.sum(axis=1, keepdims=True)
    return MultinomialBartGps(gps)


def _probit_thinned(X_fit, y_fit, X_all, M1, gap, burn, priors, rng):
    """One probit chain on (X_fit, y_fit); thinned draws predicted on X_all."""
    n = X_fit.shape[0]
    chain = _Chain(X_fit, priors, "probit", rng)
    ybar = min(max(y_fit.mean(), 1.0 / (n + 1)), n / (n + 1.0))
    offset = float(ndtri(ybar))
    out = np.empty((M1, X_all.shape[0]))
    kept = 0
    total = burn + M1 * gap
    for sweep in range(total):
        center = chain.fhat + offset
        u = rng.random(n)
        a = ndtr(-center)
        q = np.where(y_fit == 1, a + u * (1 - a), u * a)
        z = center + ndtri(np.clip(q, 1e-12, 1 - 1e-12))
        chain.sweep_trees(z - offset, 1.0)
        if sweep >= burn and (sweep - burn + 1) % gap == 0:
            f = offset + _eval_trees(chain.snapshot_trees(), chain.grids, X_all)
            out[kept] = ndtr(f)
            kept += 1
    return out


def _seed_entropy(seed):
    if seed is None:
        return None
    if isinstance(seed, (tuple, list)):
        return tuple(int(s) for s in seed)
    return int(seed)


# -- deserialization --------------------------------------------------------

def bart_from_text(text: str):
    """Rebuild a fit (prediction-capable) from its serialized form."""
    lines = text.splitlines()
    if lines[0] != _FORMAT_TAG:
        raise ValidationError(f"unknown serialization header {lines[0]!r}")
    variant = lines[1].split()[1]
    offset = float(lines[2].split()[1])
    ncov = int(lines[3].split()[1])
    grids, pos = [], 4
    for _ in range(ncov):
        parts = lines[pos].split()
        grids.append(np.array([float(v) for v in parts[1:]]))
        pos += 1
    y_min, y_range, sigma = 0.0, 1.0, np.empty(0)
    if variant == "continuous":
        parts = lines[pos].split()
        y_min, y_range = float(parts[1]), float(parts[2])
        pos += 1
        sigma = np.array([float(v) for v in lines[pos].split()[1:]])
        pos += 1
    ndraws = int(lines[pos].split()[1])
    pos += 1
    tree_draws = []
    for _ in range(ndraws):
        n_trees = int(lines[pos].split()[2])
        pos += 1
        trees = []
        for _ in range(n_trees):
            nodes = {}
            for tok in lines[pos].split():
                node_id, kind, *rest = tok.split(":")
                if kind == "s":
                    nodes[int(node_id)] = (int(rest[0]), int(rest[1]))
                else:
                    nodes[int(node_id)] = float(rest[0])
            trees.append(nodes)
            pos += 1
        tree_draws.append(trees)
    common = dict(variant=variant, offset=offset, grids=grids,
                  n_covariates=ncov, draws_f=np.zeros((ndraws, 0)),
                  tree_draws=tree_draws, burn=0)
    if variant == "probit":
        return ProbitBartFit(**common)
    return ContinuousBartFit(**common, y_min=y_min, y_range=y_range,
                             draws_sigma=sigma)
