"""Algebra of edge-weighted spanning tree distributions.

A distribution over the spanning trees of the complete graph on ``q`` nodes is
parametrized by a symmetric matrix of positive edge weights ``w``: the
probability of a tree is the product of the weights of its edges, divided by
the sum of that product over all q^(q-2) trees.  That normalizing constant is
a determinant of any principal minor of the weight Laplacian, its partial
derivatives give the per-edge "sensitivity" matrix, and the elementwise
product of weights and sensitivities gives the per-edge marginal
probabilities.

Everything is computed in the log domain.  Weights are stored as logs, a
common log scale is factored out of the Laplacian before any factorization,
and determinants are accumulated as sums of log pivots.  When the spread of
the weights exceeds what double precision can resolve, the computation is
retried in software arbitrary precision.
"""
from __future__ import annotations

import functools
import heapq
import itertools
import math
from dataclasses import dataclass

import mpmath
import numpy as np
from scipy import sparse

from .exceptions import DegeneracyError, InvalidInputError

# Log weights below this floor are treated as structural zeros: edges that
# carry no tree mass but keep the Laplacian formally positive definite.
LOG_WEIGHT_FLOOR = -700.0

# Enumeration is a test oracle, not a production path; the tree count grows
# as q^(q-2) so it is capped at a desk-checkable size.
MAX_ENUM_NODES = 8

EDGE_MASS_TOL = 1e-8


def _as_square(a, name):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidInputError(f"{name} must be a square matrix, got shape {a.shape}")
    if a.shape[0] < 2:
        raise InvalidInputError(f"{name} needs at least 2 nodes, got {a.shape[0]}")
    return a


@dataclass(frozen=True)
class EdgeWeightMatrix:
    """Symmetric positive edge weights, stored as logs with -inf diagonal."""

    logw: np.ndarray

    def __post_init__(self):
        logw = _as_square(self.logw, "logw")
        off = ~np.eye(logw.shape[0], dtype=bool)
        if not np.allclose(logw[off], logw.T[off], rtol=0.0, atol=1e-8, equal_nan=True):
            raise InvalidInputError("edge weight matrix must be symmetric")
        if np.isnan(logw[off]).any() or (logw[off] == np.inf).any():
            raise InvalidInputError("log weights must be finite or -inf")
        logw = (logw + logw.T) / 2.0
        logw = np.maximum(logw, LOG_WEIGHT_FLOOR)
        np.fill_diagonal(logw, -np.inf)
        logw.flags.writeable = False
        object.__setattr__(self, "logw", logw)

    @property
    def dim(self) -> int:
        return self.logw.shape[0]

    @classmethod
    def from_weights(cls, w) -> "EdgeWeightMatrix":
        w = _as_square(w, "weights")
        off = ~np.eye(w.shape[0], dtype=bool)
        if not (w[off] > 0).all():
            raise InvalidInputError("off-diagonal edge weights must be strictly positive")
        with np.errstate(divide="ignore"):
            logw = np.log(w)
        return cls(logw)

    @classmethod
    def from_log_weights(cls, logw) -> "EdgeWeightMatrix":
        return cls(np.array(logw, dtype=float))

    def weights(self) -> np.ndarray:
        w = np.exp(self.logw)
        np.fill_diagonal(w, 0.0)
        return w


@dataclass(frozen=True)
class LaplacianMinor:
    """First principal minor of the weight Laplacian, rescaled to unit max weight.

    The minor stored in ``matrix`` is built from weights exp(logw - scale), so
    the determinant of the actual minor is exp(logdet(matrix) + (q-1) * scale).
    """

    matrix: np.ndarray
    scale: float

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def _scaled_weights(W: EdgeWeightMatrix):
    scale = float(np.max(W.logw))
    if not np.isfinite(scale):
        raise InvalidInputError("edge weight matrix has no finite weight")
    with np.errstate(under="ignore"):
        w = np.exp(W.logw - scale)
    np.fill_diagonal(w, 0.0)
    return w, scale


def laplacian(W: EdgeWeightMatrix) -> LaplacianMinor:
    """Weight Laplacian with row/column 0 deleted, common scale factored out."""
    if not isinstance(W, EdgeWeightMatrix):
        W = EdgeWeightMatrix.from_weights(W)
    w, scale = _scaled_weights(W)
    lap = np.diag(w.sum(axis=1)) - w
    return LaplacianMinor(matrix=lap[1:, 1:], scale=scale)


def _chol_logdet(a):
    """Sum of log pivots of a Cholesky factorization, or None if it breaks down."""
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return None
    d = np.diagonal(chol)
    if not (d > 0).all():
        return None
    with np.errstate(divide="ignore"):
        logs = np.log(d)
    if not np.isfinite(logs).all():
        return None
    return 2.0 * float(logs.sum())


def _mp_dps(logw) -> int:
    finite = logw[np.isfinite(logw)]
    spread = float(finite.max() - finite.min()) if finite.size else 0.0
    return 50 + int(spread / math.log(10.0))


def _mp_minor(W: EdgeWeightMatrix, scale: float):
    q = W.dim
    lap = mpmath.zeros(q, q)
    for j in range(q):
        for k in range(j + 1, q):
            wjk = mpmath.e ** mpmath.mpf(W.logw[j, k] - scale)
            lap[j, k] -= wjk
            lap[k, j] -= wjk
            lap[j, j] += wjk
            lap[k, k] += wjk
    return lap[1:, 1:]


def _mp_logdet(W: EdgeWeightMatrix, scale: float) -> float:
    with mpmath.workdps(_mp_dps(W.logw)):
        minor = _mp_minor(W, scale)
        try:
            chol = mpmath.cholesky(minor)
        except ValueError as exc:
            raise DegeneracyError(f"weight Laplacian is numerically singular: {exc}") from exc
        acc = mpmath.mpf(0)
        for i in range(minor.rows):
            acc += mpmath.log(chol[i, i])
        return float(2 * acc)


def _mp_artifacts(W: EdgeWeightMatrix, scale: float):
    """Edge marginals and log sensitivities computed in arbitrary precision."""
    q = W.dim
    with mpmath.workdps(_mp_dps(W.logw)):
        minor = _mp_minor(W, scale)
        try:
            inv = minor ** -1
        except ZeroDivisionError as exc:
            raise DegeneracyError(f"weight Laplacian is numerically singular: {exc}") from exc
        p = np.zeros((q, q))
        logm = np.full((q, q), -np.inf)
        for j in range(q):
            for k in range(j + 1, q):
                if j == 0:
                    sens = inv[k - 1, k - 1]
                else:
                    sens = inv[j - 1, j - 1] + inv[k - 1, k - 1] - 2 * inv[j - 1, k - 1]
                if sens > 0:
                    logm[j, k] = logm[k, j] = float(mpmath.log(sens)) - scale
                p[j, k] = p[k, j] = float(
                    sens * mpmath.e ** mpmath.mpf(W.logw[j, k] - scale)
                )
    return p, logm


def max_weight_tree(logw) -> np.ndarray:
    """Boolean adjacency of one maximum-weight spanning tree of the log weights."""
    logw = np.asarray(logw, dtype=float)
    q = logw.shape[0]
    finite = np.where(np.isfinite(logw), logw, LOG_WEIGHT_FLOOR)
    cost = 1.0 + finite.max() - finite
    cost = np.triu(cost, 1)
    mst = sparse.csgraph.minimum_spanning_tree(sparse.csr_matrix(cost))
    adj = mst.toarray() > 0.0
    adj |= adj.T
    if adj.sum() != 2 * (q - 1):
        raise DegeneracyError("maximum spanning tree construction did not span")
    return adj


def _root_paths(adj):
    """Parent array and per-node sets of tree edges on the path from node 0.

    Tree edges are indexed by their child node minus one, so edge c-1 joins
    node c to parent[c].
    """
    q = adj.shape[0]
    parent = np.full(q, -1)
    stack = [0]
    visited = []
    seen = np.zeros(q, dtype=bool)
    seen[0] = True
    while stack:
        x = stack.pop()
        visited.append(x)
        for y in np.flatnonzero(adj[x]):
            if not seen[y]:
                seen[y] = True
                parent[y] = x
                stack.append(y)
    if not seen.all():
        raise DegeneracyError("spanning tree does not reach every node")
    paths = [frozenset()] * q
    for x in visited[1:]:
        paths[x] = paths[parent[x]] | {x - 1}
    return parent, paths


def _preconditioned_logdet(W: EdgeWeightMatrix):
    """Log determinant of the Laplacian minor via a spanning tree factor.

    With a maximum-weight spanning tree factored out through its incidence
    matrix, det(minor) = prod_{f in T} w_f * det(I + sum_{e not in T} u_e u_e'),
    where u_e has entries +-sqrt(w_e / w_f) along the tree path connecting the
    endpoints of e.  The cycle property bounds every ratio by 1, so the
    residual matrix is well conditioned no matter how widely the weights
    spread, and the tree product is exact in the log domain.
    """
    logw = W.logw
    q = W.dim
    adj = max_weight_tree(logw)
    parent, paths = _root_paths(adj)
    children = np.arange(1, q)
    tree_logw = float(logw[children, parent[1:]].sum())
    edge_logw = logw[children, parent[1:]]

    g = np.eye(q - 1)
    with np.errstate(under="ignore"):
        for j in range(q):
            for k in range(j + 1, q):
                if adj[j, k]:
                    continue
                diff = paths[j] ^ paths[k]
                idx = np.fromiter(diff, dtype=int)
                signs = np.where(np.isin(idx, tuple(paths[j])), 1.0, -1.0)
                u = signs * np.exp((logw[j, k] - edge_logw[idx]) / 2.0)
                g[np.ix_(idx, idx)] += np.outer(u, u)
    logdet_g = _chol_logdet(g)
    if logdet_g is None:
        return None
    return tree_logw + logdet_g


def log_partition(W: EdgeWeightMatrix) -> float:
    """Log of the weighted spanning tree sum (log normalizing constant)."""
    if not isinstance(W, EdgeWeightMatrix):
        W = EdgeWeightMatrix.from_weights(W)
    logdet = _preconditioned_logdet(W)
    if logdet is None:
        minor = laplacian(W)
        logdet = _mp_logdet(W, minor.scale)
    return logdet


def _minor_inverse_double(minor: LaplacianMinor):
    """Inverse of the scaled minor in double precision, or None on breakdown."""
    try:
        chol = np.linalg.cholesky(minor.matrix)
    except np.linalg.LinAlgError:
        return None
    d = np.diagonal(chol)
    if not ((d > 0).all() and np.isfinite(np.log(d)).all()):
        return None
    try:
        return np.linalg.inv(minor.matrix)
    except np.linalg.LinAlgError:
        # Cholesky can succeed while getrf still meets a zero pivot at
        # extreme weight spread; hand over to the high-precision path.
        return None


def _sensitivity_from_inverse(inv: np.ndarray, q: int) -> np.ndarray:
    """Assemble the per-edge sensitivity matrix from the minor inverse.

    For nodes j, k >= 1 the entry is the "effective resistance" style
    combination inv[j-1,j-1] + inv[k-1,k-1] - 2 inv[j-1,k-1]; edges touching
    the deleted node 0 reduce to the bare diagonal term.
    """
    m = np.zeros((q, q))
    d = np.diagonal(inv)
    m[1:, 1:] = d[:, None] + d[None, :] - 2.0 * inv
    m[0, 1:] = d
    m[1:, 0] = d
    np.fill_diagonal(m, 0.0)
    return m


def _artifacts_double(W: EdgeWeightMatrix, minor: LaplacianMinor):
    """Marginals and log sensitivities in double precision, or None on breakdown."""
    q = W.dim
    inv = _minor_inverse_double(minor)
    if inv is None:
        return None
    m = _sensitivity_from_inverse(inv, q)
    off = ~np.eye(q, dtype=bool)
    if (m[off] <= 0).any():
        return None
    with np.errstate(under="ignore"):
        w_scaled = np.exp(W.logw - minor.scale)
    np.fill_diagonal(w_scaled, 0.0)
    p = w_scaled * m
    mass = float(np.triu(p, 1).sum())
    if (
        abs(mass - (q - 1)) > EDGE_MASS_TOL / 10.0
        or p.min() < -EDGE_MASS_TOL
        or p.max() > 1.0 + EDGE_MASS_TOL
    ):
        return None
    logm = np.full((q, q), -np.inf)
    logm[off] = np.log(m[off]) - minor.scale
    return p, logm


def _edge_artifacts(W: EdgeWeightMatrix):
    minor = laplacian(W)
    got = _artifacts_double(W, minor)
    if got is None:
        got = _mp_artifacts(W, minor.scale)
    p, logm = got
    q = W.dim
    mass = float(np.triu(p, 1).sum())
    if abs(mass - (q - 1)) > EDGE_MASS_TOL or p.min() < -EDGE_MASS_TOL:
        raise DegeneracyError(
            f"edge marginals failed the mass identity: sum {mass!r} vs {q - 1}"
        )
    return np.clip(p, 0.0, 1.0), logm


def log_meila_matrix(W: EdgeWeightMatrix) -> np.ndarray:
    """Log of the per-edge sensitivities, -inf on the diagonal."""
    if not isinstance(W, EdgeWeightMatrix):
        W = EdgeWeightMatrix.from_weights(W)
    _, logm = _edge_artifacts(W)
    return logm


def meila_matrix(W: EdgeWeightMatrix) -> np.ndarray:
    """Per-edge sensitivities M with dB/dw_jk = M_jk * B, zero diagonal.

    Values outside the double range saturate; use log_meila_matrix when the
    weights span extreme magnitudes.
    """
    logm = log_meila_matrix(W)
    with np.errstate(over="ignore", under="ignore"):
        m = np.exp(logm)
    np.fill_diagonal(m, 0.0)
    return m


def edge_marginals(W: EdgeWeightMatrix) -> np.ndarray:
    """Probability that each edge belongs to a tree drawn from the distribution.

    The result is symmetric with zero diagonal, entries in [0, 1], and total
    upper-triangle mass q - 1.  If double precision cannot certify the mass
    identity the computation is redone in arbitrary precision.
    """
    if not isinstance(W, EdgeWeightMatrix):
        W = EdgeWeightMatrix.from_weights(W)
    p, _ = _edge_artifacts(W)
    return p


def _decode_pruefer(seq, q):
    degree = [1] * q
    for s in seq:
        degree[s] += 1
    leaves = [i for i in range(q) if degree[i] == 1]
    heapq.heapify(leaves)
    edges = []
    for s in seq:
        leaf = heapq.heappop(leaves)
        edges.append((min(leaf, s), max(leaf, s)))
        degree[leaf] -= 1
        degree[s] -= 1
        if degree[s] == 1:
            heapq.heappush(leaves, s)
    u = heapq.heappop(leaves)
    v = heapq.heappop(leaves)
    edges.append((min(u, v), max(u, v)))
    return tuple(sorted(edges))


@functools.lru_cache(maxsize=None)
def enumerate_trees(q: int):
    """All spanning trees of the complete graph on q nodes, as sorted edge tuples."""
    if not isinstance(q, int) or not 2 <= q <= MAX_ENUM_NODES:
        raise InvalidInputError(
            f"enumeration is limited to 2 <= q <= {MAX_ENUM_NODES}, got {q!r}"
        )
    if q == 2:
        return (((0, 1),),)
    return tuple(_decode_pruefer(seq, q) for seq in itertools.product(range(q), repeat=q - 2))


def log_spanning_tree_count(adjacency) -> np.ndarray | float:
    """Log number of spanning trees of one or a stack of 0/1 adjacency matrices."""
    adj = np.asarray(adjacency, dtype=float)
    if adj.ndim < 2 or adj.shape[-1] != adj.shape[-2]:
        raise InvalidInputError(f"adjacency must be square, got shape {adj.shape}")
    lap = -adj.copy()
    diag = np.arange(adj.shape[-1])
    lap[..., diag, diag] = adj.sum(axis=-1)
    minor = lap[..., 1:, 1:]
    try:
        chol = np.linalg.cholesky(minor)
    except np.linalg.LinAlgError as exc:
        raise InvalidInputError("adjacency stack contains a disconnected graph") from exc
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    if logdet.ndim == 0:
        return float(logdet)
    return logdet
