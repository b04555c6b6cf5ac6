"""Candidate neighbor cliques and VEM starting values.

Hidden actors are seeded from sparse principal components of the latent
means of the observed species: each component's support is a candidate
clique of neighbors, and the component scores give the initial hidden
means.  Complements of the supports are kept as alternate candidates so
that a hub whose neighbors were *not* picked up by the leading component
still has a chance.  ``resample_cliques`` widens the pool by rerunning
the search on row subsamples.

Index convention matches the rest of the package: hidden coordinates sit
at the end, so ``R0`` and ``beta0`` are (p + r) x (p + r) with hidden
rows/columns last.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DegeneracyError, InvalidInputError
from .tree_algebra import LOG_WEIGHT_FLOOR, EdgeWeightMatrix

# Initial correlations are clipped away from +-1: a perfectly collinear
# hidden score would make the first SSD singular before VEM can move.
R0_CLIP = 0.95

_POWER_TOL = 1e-10
_POWER_MAX_ITER = 500
_RANK_RTOL = 1e-10


def default_cardinality(p: int) -> int:
    """Default sparsity budget for loading vectors: max(3, ceil(p/3))."""
    return max(3, math.ceil(p / 3))


@dataclass(frozen=True)
class InitState:
    """Starting point for one VEM run.

    cliques    tuple of r cliques, each a sorted tuple of observed indices
    M_hidden0  (n, r) initial hidden means, standardized scores
    beta0      (p+r) x (p+r) edge weights, uniform over admissible edges
    R0         (p+r) x (p+r) initial correlation estimate
    """

    cliques: tuple
    M_hidden0: np.ndarray = field(repr=False)
    beta0: EdgeWeightMatrix = field(repr=False)
    R0: np.ndarray = field(repr=False)

    @property
    def r(self) -> int:
        return len(self.cliques)


def _truncate(v: np.ndarray, card: int) -> np.ndarray:
    """Keep the card largest-magnitude entries of v, renormalized."""
    if card < v.size:
        drop = np.argpartition(np.abs(v), v.size - card)[: v.size - card]
        v = v.copy()
        v[drop] = 0.0
    norm = np.linalg.norm(v)
    if norm == 0.0:
        return v
    return v / norm


def spca_components(M_obs, k: int, card: int) -> list:
    """Sparse loading vectors via truncated power iteration with deflation.

    Each returned vector is unit norm with at most ``card`` non-zeros.
    Components are extracted from the empirical covariance of ``M_obs``,
    deflating (Hotelling) between extractions.  If the covariance runs
    out of rank before ``k`` components are found, the shorter list is
    returned with a warning.
    """
    M = np.asarray(M_obs, dtype=float)
    if M.ndim != 2:
        raise InvalidInputError("M_obs must be a 2-d array")
    n, p = M.shape
    if not 1 <= card <= p:
        raise InvalidInputError(f"card must be in [1, {p}], got {card}")
    if not 1 <= k <= min(n, p):
        raise InvalidInputError(f"k must be in [1, min(n, p)={min(n, p)}], got {k}")

    cov = np.cov(M, rowvar=False)
    cov = 0.5 * (cov + cov.T)
    lam0 = float(np.linalg.eigvalsh(cov)[-1])
    cut = _RANK_RTOL * max(lam0, 1.0)

    loadings = []
    for comp in range(k):
        eigvals, eigvecs = np.linalg.eigh(cov)
        lam = float(eigvals[-1])
        if lam <= cut:
            warnings.warn(
                f"covariance exhausted after {comp} of {k} components",
                stacklevel=2,
            )
            break
        v = _truncate(eigvecs[:, -1], card)
        for _ in range(_POWER_MAX_ITER):
            u = cov @ v
            norm = np.linalg.norm(u)
            if norm < 1e-300:
                break
            u = _truncate(u, card)
            if min(np.linalg.norm(u - v), np.linalg.norm(u + v)) < _POWER_TOL:
                v = u
                break
            v = u
        lead = int(np.argmax(np.abs(v)))
        if v[lead] < 0:
            v = -v
        loadings.append(v)
        lam_v = float(v @ cov @ v)
        cov = cov - lam_v * np.outer(v, v)
        cov = 0.5 * (cov + cov.T)
    return loadings


def _support(v: np.ndarray) -> tuple:
    return tuple(np.flatnonzero(v).tolist())


def candidate_cliques(M_obs, r: int, card: int | None = None) -> list:
    """Candidate clique assignments for r hidden actors.

    Returns a list of candidates; each candidate is a tuple of r cliques
    (sorted index tuples).  For r = 1 the candidates are the supports of
    the first two sparse components and their complements.  For r > 1
    the primary candidate uses the first r component supports, and each
    actor gets one alternate where its clique is replaced by the
    complement.  Empty cliques are dropped, duplicates removed.
    """
    M = np.asarray(M_obs, dtype=float)
    if M.ndim != 2:
        raise InvalidInputError("M_obs must be a 2-d array")
    if r < 1:
        raise InvalidInputError(f"candidate search needs r >= 1, got {r}")
    p = M.shape[1]
    if card is None:
        card = default_cardinality(p)

    k = max(2, r)
    loadings = spca_components(M, k, card)
    supports = [_support(v) for v in loadings]
    everything = set(range(p))

    raw = []
    if r == 1:
        heads = supports[:2]
        for s in heads:
            if s:
                raw.append((s,))
        for s in heads:
            comp = tuple(sorted(everything - set(s)))
            if comp:
                raw.append((comp,))
    else:
        if len(supports) < r:
            raise DegeneracyError(
                f"only {len(supports)} usable components for {r} hidden actors"
            )
        primary = tuple(supports[:r])
        if all(primary):
            raw.append(primary)
        for i in range(r):
            comp = tuple(sorted(everything - set(primary[i])))
            alt = primary[:i] + (comp,) + primary[i + 1 :]
            if all(alt):
                raw.append(alt)

    seen = set()
    out = []
    for cand in raw:
        if cand not in seen:
            seen.add(cand)
            out.append(cand)
    if not out:
        raise DegeneracyError("all candidate cliques were empty")
    return out


def _clique_loading(M: np.ndarray, clique: tuple) -> np.ndarray:
    """Dominant eigenvector of the covariance restricted to a clique.

    Used when a clique arrives without a loading vector (complement
    candidates, user-supplied cliques).  Unlike a plain indicator mean,
    the eigenvector aligns the signs of anti-correlated members, which
    matters because a hub can drive its neighbors with either sign.
    """
    sub = M[:, list(clique)]
    if len(clique) == 1:
        v = np.ones(1)
    else:
        cov = np.atleast_2d(np.cov(sub, rowvar=False))
        v = np.linalg.eigh(cov)[1][:, -1]
        lead = int(np.argmax(np.abs(v)))
        if v[lead] < 0:
            v = -v
    w = np.zeros(M.shape[1])
    w[list(clique)] = v
    return w


def init_params(M_obs, cliques, loadings=None) -> InitState:
    """Build an InitState from clique assignments.

    Each hidden actor's initial mean column is the projection of M_obs
    onto a loading vector (the actor's sparse component if available,
    otherwise the leading eigenvector of the clique's covariance),
    standardized to zero mean and unit variance.  R0 is the empirical
    correlation of [M_obs, M_hidden0] with off-diagonals clipped to
    +-R0_CLIP; beta0 is uniform over admissible edges with hidden-hidden
    pairs pinned at the weight floor.
    """
    M = np.asarray(M_obs, dtype=float)
    if M.ndim != 2:
        raise InvalidInputError("M_obs must be a 2-d array")
    n, p = M.shape
    cliques = tuple(tuple(int(j) for j in c) for c in cliques)
    r = len(cliques)
    for c in cliques:
        if not c:
            raise InvalidInputError("clique must be non-empty")
        if len(set(c)) != len(c):
            raise InvalidInputError(f"clique {c} has repeated members")
        if min(c) < 0 or max(c) >= p:
            raise InvalidInputError(f"clique {c} outside observed range [0, {p})")
    if loadings is None:
        loadings = [None] * r
    if len(loadings) != r:
        raise InvalidInputError("one loading per clique required")

    scores = np.empty((n, r))
    for i, (clique, w) in enumerate(zip(cliques, loadings)):
        if w is None:
            w = _clique_loading(M, clique)
        else:
            w = np.asarray(w, dtype=float)
            if w.shape != (p,):
                raise InvalidInputError(f"loading {i} has shape {w.shape}, want ({p},)")
        s = M @ w
        sd = float(s.std())
        if not np.isfinite(sd) or sd <= 0.0:
            raise DegeneracyError(f"hidden actor {i} has a zero-variance initial score")
        scores[:, i] = (s - s.mean()) / sd

    stacked = np.hstack([M, scores]) if r else M
    with np.errstate(invalid="ignore", divide="ignore"):
        R0 = np.corrcoef(stacked, rowvar=False)
    R0 = np.atleast_2d(R0)
    if not np.all(np.isfinite(R0)):
        raise DegeneracyError("constant column: correlation init undefined")
    R0 = np.clip(R0, -R0_CLIP, R0_CLIP)
    np.fill_diagonal(R0, 1.0)

    q = p + r
    logw = np.zeros((q, q))
    if r > 1:
        logw[p:, p:] = LOG_WEIGHT_FLOOR
    beta0 = EdgeWeightMatrix.from_log_weights(logw)
    return InitState(cliques=cliques, M_hidden0=scores, beta0=beta0, R0=R0)


def resample_cliques(
    M_obs,
    r: int,
    n_resamples: int = 200,
    frac: float = 0.8,
    card: int | None = None,
    seed=None,
) -> list:
    """Clique candidates pooled over row subsamples, deduplicated.

    Runs ``candidate_cliques`` on ``n_resamples`` random subsets of
    ``frac * n`` rows (without replacement) and returns the unique
    candidates in first-seen order.  Subsamples whose covariance is too
    degenerate to yield candidates are skipped.
    """
    M = np.asarray(M_obs, dtype=float)
    if M.ndim != 2:
        raise InvalidInputError("M_obs must be a 2-d array")
    if not 0.0 < frac < 1.0:
        raise InvalidInputError(f"frac must be in (0, 1), got {frac}")
    if n_resamples < 1:
        raise InvalidInputError(f"n_resamples must be >= 1, got {n_resamples}")
    n = M.shape[0]
    m = int(round(frac * n))
    if m < 3:
        raise InvalidInputError(f"subsample of {m} rows is too small")

    rng = np.random.default_rng(seed)
    seen = set()
    out = []
    for _ in range(n_resamples):
        rows = rng.choice(n, size=m, replace=False)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            try:
                cands = candidate_cliques(M[rows], r, card=card)
            except DegeneracyError:
                continue
        for cand in cands:
            if cand not in seen:
                seen.add(cand)
                out.append(cand)
    return out
