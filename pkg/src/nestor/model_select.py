"""Choosing the number of hidden actors by cross-validated composite likelihood.

The score for a candidate r is a V-fold cross-validated pairwise
composite log likelihood: fit the full pipeline on each training split,
draw spanning trees from the fitted tree posterior with an exact
rejection sampler, and average the held-out bivariate count likelihoods
over those trees.  The bivariate marginal of a pair under one tree uses
the observed-margin covariance of the tree-structured latent Gaussian
with the hidden coordinates marginalized out.

Rejection sampling of trees: a proposal graph G is drawn with
independent edges (probabilities scaled from the current edge marginals
and clamped at one), retried until connected; a uniform spanning tree
of G is drawn by Wilson's loop-erased random walk; and the proposal
density q(T) = Pr{G contains T} E[1/#trees(G) | G contains T] is
estimated once per distinct tree by forcing T into Monte-Carlo graph
draws.  Because any graph containing a spanning tree is connected, the
connectivity conditioning cancels into the envelope constant M, which
is tuned automatically.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .exceptions import (
    DegeneracyError,
    InvalidInputError,
    NestorError,
    SamplerError,
)
from .pipeline import FitConfig, NetworkFit, fit_network
from .pln import CountDataset, bivariate_pln_logpdf_many, fit_pln
from .tree_algebra import (
    EdgeWeightMatrix,
    edge_marginals,
    log_partition,
    log_spanning_tree_count,
    max_weight_tree,
)
from .vem import OmegaEstimate

_TUNE_WINDOW = 100          # proposals between acceptance-rate checks
_TUNE_FLOOR = 0.01          # tune M down while acceptance is below this
_RERAISE_CAP = 80           # M re-raises before giving up
_CONNECT_RETRY_CAP = 1000
_WARMUP_PROPOSALS = 8
_SUPPORT_FLOOR = 1e-6       # marginals below this are dropped from the proposal


@dataclass(frozen=True)
class TreeSample:
    """One exact draw from the tree distribution of an EdgeWeightMatrix."""

    edges: tuple                # q-1 sorted (j, k) pairs
    proposals_used: int


@dataclass(frozen=True)
class CrossValConfig:
    r_grid: tuple = (0, 1, 2, 3)
    n_folds: int = 10
    tree_draws: int = 100
    seed: int = 0
    alpha: float = 0.1
    eps: float = 1e-3
    max_iter: int = 100
    forced_graph_draws: int = 64
    card: int | None = None

    def __post_init__(self):
        grid = tuple(int(r) for r in self.r_grid)
        if not grid or any(r < 0 for r in grid) or len(set(grid)) != len(grid):
            raise InvalidInputError(f"r_grid must be distinct nonnegative ints, got {self.r_grid}")
        object.__setattr__(self, "r_grid", grid)
        if self.n_folds < 2:
            raise InvalidInputError(f"need at least 2 folds, got {self.n_folds}")
        if self.tree_draws < 1 or self.forced_graph_draws < 1:
            raise InvalidInputError("tree_draws and forced_graph_draws must be >= 1")


class TreeSampler:
    """Exact rejection sampler for spanning trees under edge weights beta."""

    def __init__(self, beta: EdgeWeightMatrix, seed=None, forced_graph_draws: int = 64):
        self.beta = beta
        self.q = beta.dim
        self.rng = np.random.default_rng(seed)
        self.forced_graph_draws = forced_graph_draws
        self.log_b = log_partition(beta)
        self.P = edge_marginals(beta)
        self.Q = self._proposal_probs(self.P)
        with np.errstate(divide="ignore"):
            self.logQ = np.log(self.Q)
        self._qtilde = {}
        self._ratio = {}
        self.n_proposed = 0
        self.n_accepted = 0
        self.n_reraise = 0
        self.max_log_ratio = -np.inf
        self.log_m = self._initial_log_m()

    # -- proposal machinery -------------------------------------------------

    def _proposal_probs(self, P: np.ndarray) -> np.ndarray:
        """Q = min(1, c P) with c chosen for mean proposal degree >= 2 log q.

        Edges whose marginal is below _SUPPORT_FLOOR are dropped from the
        proposal entirely.  Without this, a saturated P (mass concentrated
        on one tree) forces c so high that negligible edges reach Q = 1
        and the proposal graph degenerates to junk-dense noise that almost
        never contains the high-probability trees; acceptance then decays
        like one over the support graph's tree count.  Trees using an
        excluded edge are never drawn; they carry total mass at most
        q^2 * floor = O(1e-4), far below the Monte-Carlo noise of any
        downstream average.  The support graph stays connected: every cut
        is crossed by every spanning tree, so its marginal mass across
        the cut is at least 1.
        """
        q = self.q
        jj, kk = np.triu_indices(q, k=1)
        pvals = np.where(P[jj, kk] >= _SUPPORT_FLOOR, P[jj, kk], 0.0)
        # Sum of Q must reach q log q; grow c geometrically (sum of the
        # clamped values is monotone in c and saturates at #nonzero).
        target = min(q * math.log(q), 0.99 * np.count_nonzero(pvals))
        c = 1.0
        for _ in range(80):
            if np.minimum(1.0, c * pvals).sum() >= target:
                break
            c *= 2.0
        Q = np.zeros((q, q))
        Q[jj, kk] = np.minimum(1.0, c * pvals)
        return Q + Q.T

    def _initial_log_m(self) -> float:
        # Cayley count over the least-likely spanning tree's probability.
        neg = -self.beta.logw
        np.fill_diagonal(neg, -np.inf)
        adj_min = max_weight_tree(neg)
        jj, kk = np.nonzero(np.triu(adj_min))
        log_m_beta = self.beta.logw[jj, kk].sum() - self.log_b
        bound = (self.q - 2) * math.log(self.q) - log_m_beta
        warm = self._warmup_ratios()
        if warm:
            bound = min(bound, math.log(1e6) + max(warm))
        return bound

    def _warmup_ratios(self) -> list:
        ratios = []
        for _ in range(_WARMUP_PROPOSALS):
            tree = self._propose_tree()
            ratios.append(self._log_ratio(tree))
        return ratios

    def _draw_graph(self, force=None) -> np.ndarray:
        for _ in range(_CONNECT_RETRY_CAP):
            u = self.rng.random((self.q, self.q))
            upper = np.triu(u < self.Q, k=1)
            adj = upper | upper.T
            if force is not None:
                adj |= force
            if self._connected(adj):
                return adj
        raise SamplerError(
            f"no connected proposal graph in {_CONNECT_RETRY_CAP} tries"
        )

    @staticmethod
    def _connected(adj: np.ndarray) -> bool:
        q = adj.shape[0]
        seen = np.zeros(q, dtype=bool)
        stack = [0]
        seen[0] = True
        count = 1
        while stack:
            v = stack.pop()
            for w in np.flatnonzero(adj[v]):
                if not seen[w]:
                    seen[w] = True
                    count += 1
                    stack.append(int(w))
        return count == q

    def _wilson_ust(self, adj: np.ndarray) -> tuple:
        """Uniform spanning tree of a connected graph via loop-erased walks."""
        rng = self.rng
        nbrs = [np.flatnonzero(adj[v]) for v in range(self.q)]
        in_tree = np.zeros(self.q, dtype=bool)
        in_tree[0] = True
        nxt = np.full(self.q, -1)
        edges = []
        for start in range(1, self.q):
            if in_tree[start]:
                continue
            v = start
            while not in_tree[v]:
                nb = nbrs[v]
                v2 = int(nb[rng.integers(len(nb))])
                nxt[v] = v2
                v = v2
            v = start
            while not in_tree[v]:
                in_tree[v] = True
                w = int(nxt[v])
                edges.append((v, w) if v < w else (w, v))
                v = w
        return tuple(sorted(edges))

    def _propose_tree(self) -> tuple:
        graph = self._draw_graph()
        self.n_proposed += 1
        return self._wilson_ust(graph)

    # -- target / proposal densities ----------------------------------------

    def _log_p(self, tree: tuple) -> float:
        jj = [e[0] for e in tree]
        kk = [e[1] for e in tree]
        return float(self.beta.logw[jj, kk].sum() - self.log_b)

    def _log_qtilde(self, tree: tuple) -> float:
        cached = self._qtilde.get(tree)
        if cached is not None:
            return cached
        jj = [e[0] for e in tree]
        kk = [e[1] for e in tree]
        log_contain = float(self.logQ[jj, kk].sum())
        force = np.zeros((self.q, self.q), dtype=bool)
        force[jj, kk] = True
        force |= force.T
        m = self.forced_graph_draws
        u = self.rng.random((m, self.q, self.q))
        upper = np.triu(u < self.Q, k=1)
        graphs = (upper | upper.transpose(0, 2, 1)) | force
        log_counts = np.atleast_1d(log_spanning_tree_count(graphs))
        log_inv_mean = float(logsumexp(-log_counts) - math.log(m))
        val = log_contain + log_inv_mean
        self._qtilde[tree] = val
        return val

    def _log_ratio(self, tree: tuple) -> float:
        cached = self._ratio.get(tree)
        if cached is None:
            cached = self._log_p(tree) - self._log_qtilde(tree)
            self._ratio[tree] = cached
            if cached > self.max_log_ratio:
                self.max_log_ratio = cached
        return cached

    # -- rejection loop ------------------------------------------------------

    def sample_many(self, k: int) -> list:
        """k exact draws; restarts the whole batch whenever M must rise."""
        while True:
            try:
                return self._collect(k)
            except _EnvelopeOverflow as bump:
                self.n_reraise += 1
                if self.n_reraise > _RERAISE_CAP:
                    raise SamplerError(
                        f"acceptance ratio stayed above 1 after {_RERAISE_CAP} "
                        f"envelope raises; offending tree {bump.tree}"
                    )
                self.log_m = max(self.log_m + math.log(10.0), bump.log_ratio)

    def _collect(self, k: int) -> list:
        out = []
        window_proposed = 0
        window_accepted = 0
        start = self.n_proposed
        while len(out) < k:
            tree = self._propose_tree()
            window_proposed += 1
            log_ratio = self._log_ratio(tree) - self.log_m
            if log_ratio > 0.0:
                raise _EnvelopeOverflow(tree, self._log_ratio(tree))
            if np.log(self.rng.random()) < log_ratio:
                self.n_accepted += 1
                window_accepted += 1
                out.append(TreeSample(edges=tree, proposals_used=self.n_proposed - start))
                start = self.n_proposed
            if window_proposed >= _TUNE_WINDOW:
                if window_accepted / window_proposed < _TUNE_FLOOR:
                    # never tune below the largest ratio already seen, or
                    # the next visit to that tree forces a spurious restart
                    self.log_m = max(self.log_m - math.log(10.0), self.max_log_ratio)
                window_proposed = 0
                window_accepted = 0
        return out

    def sample(self) -> TreeSample:
        return self.sample_many(1)[0]


class _EnvelopeOverflow(Exception):
    def __init__(self, tree, log_ratio):
        self.tree = tree
        self.log_ratio = log_ratio


def sample_tree(beta: EdgeWeightMatrix, seed=None) -> TreeSample:
    """One exact tree draw; use TreeSampler directly for repeated draws."""
    return TreeSampler(beta, seed=seed).sample()


# -- pairwise composite likelihood ----------------------------------------


def _fold_split(n: int, n_folds: int, seed) -> list:
    if n_folds > n:
        raise InvalidInputError(f"more folds ({n_folds}) than sites ({n})")
    rng = np.random.default_rng(seed)
    return np.array_split(rng.permutation(n), n_folds)


def _tree_adjacency(q: int, edges) -> np.ndarray:
    adj = np.zeros((q, q), dtype=bool)
    for j, k in edges:
        adj[j, k] = adj[k, j] = True
    return adj


def observed_margin_covariance(net: NetworkFit, edges) -> np.ndarray:
    """Observed-block covariance of one tree's latent Gaussian.

    Builds the tree precision from the shared edge parameters, then
    marginalizes the hidden coordinates by inverting the Schur
    complement of the hidden block.  The result has unit diagonal.
    """
    state = net.state
    q = state.dim
    p = q - state.r
    adj = _tree_adjacency(q, edges)
    est = OmegaEstimate(state.omega_offdiag, state.r_offdiag, state.edge_logdet)
    omega = np.where(adj, state.omega_offdiag, 0.0)
    np.fill_diagonal(omega, 0.0)
    omega = omega + np.diag(est.tree_diagonal(adj))
    if state.r == 0:
        return np.linalg.inv(omega)
    a = omega[:p, :p]
    b = omega[:p, p:]
    d = omega[p:, p:]
    schur = a - b @ np.linalg.solve(d, b.T)
    return np.linalg.inv(schur)


def _fold_pcl(net: NetworkFit, data: CountDataset, idx, sampler, tree_draws: int) -> float:
    """Held-out pairwise composite log likelihood, averaged over trees."""
    fit = net.pln
    p = fit.M_obs.shape[1]
    y = data.counts[idx]
    mu = data.offsets[idx] + data.covariates[idx] @ fit.theta
    sigma = fit.sigma
    jj, kk = np.triu_indices(p, k=1)

    draws = sampler.sample_many(tree_draws)
    counts = {}
    for sample in draws:
        counts[sample.edges] = counts.get(sample.edges, 0) + 1

    total = 0.0
    for edges, mult in counts.items():
        cov = observed_margin_covariance(net, edges)
        s12 = (sigma[jj] * sigma[kk]) * cov[jj, kk]
        ll = bivariate_pln_logpdf_many(
            y[:, jj].ravel(),
            y[:, kk].ravel(),
            mu[:, jj].ravel(),
            mu[:, kk].ravel(),
            np.broadcast_to(sigma[jj] ** 2, (len(idx), jj.size)).ravel(),
            np.broadcast_to(sigma[kk] ** 2, (len(idx), kk.size)).ravel(),
            np.broadcast_to(s12, (len(idx), jj.size)).ravel(),
        )
        total += mult / len(draws) * float(ll.sum())
    return total


def pcl_score(data: CountDataset, r: int, config: CrossValConfig, _pln_cache=None):
    """Cross-validated pairwise composite likelihood for r hidden actors.

    Returns (total, per_fold) where per_fold has one entry per retained
    fold (nan for dropped folds).  Folds whose VEM runs all degenerate
    are dropped with a warning; if at least half the folds drop, the
    score is declared unusable.
    """
    if r < 0:
        raise InvalidInputError(f"r must be >= 0, got {r}")
    n = data.counts.shape[0]
    folds = _fold_split(n, config.n_folds, config.seed)
    fit_config = FitConfig(
        r=r, alpha=config.alpha, eps=config.eps,
        max_iter=config.max_iter, card=config.card,
    )
    per_fold = []
    dropped = 0
    for v, idx in enumerate(folds):
        train = np.setdiff1d(np.arange(n), idx)
        if _pln_cache is not None and v in _pln_cache:
            pln_fit = _pln_cache[v]
        else:
            pln_fit = fit_pln(data.subset(train))
            if _pln_cache is not None:
                _pln_cache[v] = pln_fit
        try:
            net = fit_network(None, fit_config, pln_fit=pln_fit)
        except NestorError as err:
            warnings.warn(f"fold {v}: no usable fit at r={r} ({err}); fold dropped")
            per_fold.append(float("nan"))
            dropped += 1
            continue
        sampler = TreeSampler(
            net.state.beta_tilde,
            seed=np.random.SeedSequence((config.seed, r, v)),
            forced_graph_draws=config.forced_graph_draws,
        )
        per_fold.append(_fold_pcl(net, data, idx, sampler, config.tree_draws))
    if dropped * 2 >= config.n_folds:
        raise DegeneracyError(
            f"{dropped} of {config.n_folds} folds dropped at r={r}; selection unusable"
        )
    total = float(np.nansum(per_fold))
    return total, per_fold


@dataclass(frozen=True)
class SelectionResult:
    r_best: int
    table: tuple  # one row dict per r: {"r", "pcl", "folds"}

    def csv_rows(self) -> list:
        """Tidy rows (r, fold, pcl) plus a total row per r."""
        rows = ["r,fold,pcl"]
        for entry in self.table:
            for v, val in enumerate(entry["folds"]):
                rows.append(f"{entry['r']},{v},{val:.6f}")
            rows.append(f"{entry['r']},total,{entry['pcl']:.6f}")
        return rows


def select_r(data: CountDataset, config: CrossValConfig) -> SelectionResult:
    """Evaluate pcl_score over the grid and pick the best r.

    Ties (within nothing: exact float comparison) and failed r values
    are resolved conservatively: a failed r is skipped entirely, and the
    smallest r among equal scores wins.
    """
    pln_cache = {}
    table = []
    for r in config.r_grid:
        try:
            total, per_fold = pcl_score(data, r, config, _pln_cache=pln_cache)
        except DegeneracyError as err:
            warnings.warn(f"r={r} dropped from the grid: {err}")
            continue
        table.append({"r": r, "pcl": total, "folds": per_fold})
    if not table:
        raise DegeneracyError("no candidate r could be scored")
    best = max(table, key=lambda row: (row["pcl"], -row["r"]))
    return SelectionResult(r_best=best["r"], table=tuple(table))
