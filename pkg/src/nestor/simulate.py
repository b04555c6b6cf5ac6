"""Ground-truth replicate generator for the benchmark harness.

A replicate is built in three steps: a scale-free dependency graph over
q = p + 1 nodes, a latent Gaussian layer whose precision matrix has the
graph as its exact support, and Poisson counts driven by the latent
layer.  The max-degree node is designated hidden: its counts are
withheld and its latent column kept for evaluation.  Nodes are relabeled
so the hidden node is always the last index, matching the convention
used by the inference code.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidInputError

LOG_RATE_CLIP = 20.0

# Attachment propensity grows as degree**ATTACH_POWER.  Slightly
# sub-linear: calibrated so the max-degree distribution at q=15 puts
# mass on all three influence classes in roughly the 100/132/68
# proportions (see test_simulate for the empirical check).
ATTACH_POWER = 0.9


def influence_class(degree: int) -> str:
    """Bucket a hub degree: Minor <= 5, Medium 6-7, Major >= 8."""
    if degree <= 5:
        return "Minor"
    if degree <= 7:
        return "Medium"
    return "Major"


@dataclass(frozen=True)
class SimReplicate:
    adjacency: np.ndarray = field(repr=False)  # (q, q) 0/1, hidden node last
    hidden_index: int
    omega_true: np.ndarray = field(repr=False)
    sigma_true: np.ndarray = field(repr=False)
    theta_true: np.ndarray = field(repr=False)
    U: np.ndarray = field(repr=False)  # (n, q) latent draws
    Y: np.ndarray = field(repr=False)  # (n, q-1) counts, hidden withheld
    influence_class: str
    seed: int

    @property
    def q(self) -> int:
        return self.adjacency.shape[0]

    @property
    def p(self) -> int:
        return self.q - 1

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def hidden_degree(self) -> int:
        return int(self.adjacency[self.hidden_index].sum())

    @property
    def neighbors_true(self) -> tuple:
        """Observed neighbors of the hidden node, as a sorted tuple."""
        return tuple(np.flatnonzero(self.adjacency[self.hidden_index]).tolist())


def scale_free_graph(q: int, seed, extra_edges: int = 0) -> np.ndarray:
    """Preferential-attachment graph: a tree backbone plus extras.

    Each new node attaches to an existing node picked with probability
    proportional to degree**ATTACH_POWER, giving a heavy-tailed degree
    sequence.  ``extra_edges`` additional edges are overlaid uniformly
    over absent pairs (hook for denser topologies; default none).
    """
    if q < 5:
        raise InvalidInputError(f"need q >= 5 nodes, got {q}")
    if extra_edges < 0:
        raise InvalidInputError("extra_edges must be >= 0")
    rng = np.random.default_rng(seed)
    adj = np.zeros((q, q), dtype=np.int8)
    adj[0, 1] = adj[1, 0] = 1
    degree = np.zeros(q)
    degree[:2] = 1.0
    for v in range(2, q):
        prop = degree[:v] ** ATTACH_POWER
        target = rng.choice(v, p=prop / prop.sum())
        adj[v, target] = adj[target, v] = 1
        degree[v] += 1.0
        degree[target] += 1.0
    for _ in range(extra_edges):
        absent = np.argwhere(np.triu(adj == 0, k=1))
        if absent.size == 0:
            break
        j, k = absent[rng.integers(len(absent))]
        adj[j, k] = adj[k, j] = 1
    return adj


def precision_from_graph(adjacency, seed) -> tuple:
    """Latent precision and correlation with the graph as exact support.

    Omega = I + delta * (A with symmetric random signs), delta the
    largest value in (0, 1] keeping the minimum eigenvalue >= 0.1.
    Returns (omega, R) where R is the inverse rescaled to unit diagonal.
    """
    A = np.asarray(adjacency)
    q = A.shape[0]
    if A.shape != (q, q) or not np.array_equal(A, A.T):
        raise InvalidInputError("adjacency must be square and symmetric")
    rng = np.random.default_rng(seed)
    signs = np.triu(rng.choice((-1.0, 1.0), size=(q, q)), k=1)
    signs = signs + signs.T
    signed = A * signs
    if A.any():
        lam_min = float(np.linalg.eigvalsh(signed)[0])
        delta = min(1.0, 0.9 / abs(lam_min))
    else:
        delta = 1.0
    omega = np.eye(q) + delta * signed
    cov = np.linalg.inv(omega)
    d = 1.0 / np.sqrt(np.diag(cov))
    R = cov * np.outer(d, d)
    np.fill_diagonal(R, 1.0)
    return omega, R


def simulate_counts(R_true, theta, sigma, offsets, n: int, seed) -> tuple:
    """Draw latent Gaussians and conditionally Poisson counts.

    U_i iid N(0, R_true); Y_ij ~ Poisson(exp(o_ij + theta_j + sigma_j
    U_ij)).  Counts are returned for every node; withholding a hidden
    column is the caller's business.  Log-rates are clipped at
    LOG_RATE_CLIP with a warning.
    """
    R = np.asarray(R_true, dtype=float)
    q = R.shape[0]
    theta = np.broadcast_to(np.asarray(theta, dtype=float), (q,))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (q,))
    if np.any(sigma < 0):
        raise InvalidInputError("sigma must be >= 0")
    offsets = np.zeros((n, q)) if offsets is None else np.asarray(offsets, dtype=float)
    offsets = np.broadcast_to(offsets, (n, q))
    rng = np.random.default_rng(seed)
    L = np.linalg.cholesky(R)
    U = rng.standard_normal((n, q)) @ L.T
    log_rate = offsets + theta + sigma * U
    if np.any(log_rate > LOG_RATE_CLIP):
        warnings.warn(
            f"clipping {int((log_rate > LOG_RATE_CLIP).sum())} log-rates at "
            f"{LOG_RATE_CLIP}",
            stacklevel=2,
        )
        log_rate = np.minimum(log_rate, LOG_RATE_CLIP)
    Y = rng.poisson(np.exp(log_rate))
    return U, Y


def make_replicate(
    p: int,
    n: int = 100,
    seed: int = 0,
    theta0: float = math.log(4.0),
    sigma0: float = 1.0,
    extra_edges: int = 0,
) -> SimReplicate:
    """One benchmark replicate: p observed species plus one hidden hub.

    The max-degree node of a (p+1)-node scale-free graph (lowest index
    on ties) is relabeled to the last position and its counts dropped.
    """
    if p < 4:
        raise InvalidInputError(f"need p >= 4 observed species, got {p}")
    q = p + 1
    ss = np.random.SeedSequence(seed)
    graph_seed, prec_seed, count_seed = ss.spawn(3)
    adj = scale_free_graph(q, graph_seed, extra_edges=extra_edges)
    hub = int(np.argmax(adj.sum(axis=0)))
    perm = [v for v in range(q) if v != hub] + [hub]
    adj = adj[np.ix_(perm, perm)]
    omega, R = precision_from_graph(adj, prec_seed)
    theta = np.full(q, theta0)
    sigma = np.full(q, sigma0)
    U, Y_all = simulate_counts(R, theta, sigma, None, n, count_seed)
    deg = int(adj[q - 1].sum())
    return SimReplicate(
        adjacency=adj,
        hidden_index=q - 1,
        omega_true=omega,
        sigma_true=sigma,
        theta_true=theta,
        U=U,
        Y=Y_all[:, : q - 1],
        influence_class=influence_class(deg),
        seed=seed,
    )


def make_null_counts(
    p: int,
    n: int = 100,
    seed: int = 0,
    theta0: float = math.log(4.0),
    sigma0: float = 1.0,
) -> tuple:
    """Counts from a fully observed network: no node is held out.

    Same graph and precision construction as make_replicate over p
    nodes, but every column is kept.  Returns (Y, adjacency).
    """
    if p < 5:
        raise InvalidInputError(f"need p >= 5 species, got {p}")
    ss = np.random.SeedSequence(seed)
    graph_seed, prec_seed, count_seed = ss.spawn(3)
    adj = scale_free_graph(p, graph_seed)
    _, R = precision_from_graph(adj, prec_seed)
    theta = np.full(p, theta0)
    sigma = np.full(p, sigma0)
    _, Y = simulate_counts(R, theta, sigma, None, n, count_seed)
    return Y, adj
