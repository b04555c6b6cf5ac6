"""Scoring inferred networks against simulation ground truth.

All functions assume the package-wide layout: hidden nodes occupy the
last ``n_hidden`` indices of both the inferred edge-probability matrix
and the true adjacency.  With several hidden actors the inferred
columns must first be aligned to the true ones (``match_hidden``);
hidden-hidden pairs are excluded from every score since the model pins
them to zero by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .exceptions import InvalidInputError


def _scored_pairs(q: int, n_hidden: int):
    """Upper-triangle pair indices excluding hidden-hidden pairs."""
    jj, kk = np.triu_indices(q, k=1)
    keep = (jj < q - n_hidden) | (kk < q - n_hidden)
    return jj[keep], kk[keep]


def auc_edges(P, adjacency_true, n_hidden: int = 1) -> float:
    """Rank-based AUC of edge scores over all non-hidden-hidden pairs.

    Ties are handled by midrank, so the result matches the usual
    Mann-Whitney statistic.
    """
    P = np.asarray(P, dtype=float)
    A = np.asarray(adjacency_true)
    q = P.shape[0]
    if A.shape != P.shape:
        raise InvalidInputError(
            f"score matrix {P.shape} and adjacency {A.shape} differ"
        )
    if not 0 <= n_hidden < q:
        raise InvalidInputError(f"n_hidden must be in [0, {q}), got {n_hidden}")
    jj, kk = _scored_pairs(q, n_hidden)
    scores = P[jj, kk]
    labels = A[jj, kk] > 0
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InvalidInputError("AUC undefined: truth has a single class")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def hidden_link_pr(P, adjacency_true, threshold: float = 0.5, n_hidden: int = 1):
    """Precision and recall of hidden-actor links at a probability cutoff.

    Only pairs joining a hidden node to an observed one are counted.
    Undefined ratios (no predicted positives, or no true links) are
    returned as None so callers can drop them from averages.
    """
    P = np.asarray(P, dtype=float)
    A = np.asarray(adjacency_true)
    q = P.shape[0]
    if A.shape != P.shape:
        raise InvalidInputError(
            f"score matrix {P.shape} and adjacency {A.shape} differ"
        )
    if not 1 <= n_hidden < q:
        raise InvalidInputError(f"n_hidden must be in [1, {q}), got {n_hidden}")
    obs = np.arange(q - n_hidden)
    hid = np.arange(q - n_hidden, q)
    pred = P[np.ix_(hid, obs)] >= threshold
    truth = A[np.ix_(hid, obs)] > 0
    tp = int((pred & truth).sum())
    fp = int((pred & ~truth).sum())
    fn = int((~pred & truth).sum())
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    return precision, recall


def hidden_correlation(M_h, U_h_true) -> float:
    """Absolute Pearson correlation of an inferred hidden mean vector
    with the true latent column.  The latent sign is unidentifiable, so
    only the magnitude is meaningful.  Returns nan when either vector is
    (numerically) constant.
    """
    m = np.asarray(M_h, dtype=float).ravel()
    u = np.asarray(U_h_true, dtype=float).ravel()
    if m.shape != u.shape:
        raise InvalidInputError(f"length mismatch: {m.shape} vs {u.shape}")
    if m.size < 3:
        raise InvalidInputError("need at least 3 observations")
    if m.std() == 0.0 or u.std() == 0.0:
        return float("nan")
    return float(abs(np.corrcoef(m, u)[0, 1]))


def match_hidden(M_hidden, U_hidden_true) -> list:
    """Greedy alignment of inferred hidden columns to true ones.

    Pairs are chosen by decreasing |correlation|; each inferred and each
    true column is used at most once.  Returns a list of
    (inferred_index, true_index) tuples sorted by inferred index.
    Degenerate (constant) columns rank last.
    """
    M = np.atleast_2d(np.asarray(M_hidden, dtype=float))
    U = np.atleast_2d(np.asarray(U_hidden_true, dtype=float))
    if M.shape[0] != U.shape[0]:
        raise InvalidInputError("row counts differ")
    r_inf, r_true = M.shape[1], U.shape[1]
    C = np.full((r_inf, r_true), -1.0)
    for i in range(r_inf):
        for j in range(r_true):
            c = hidden_correlation(M[:, i], U[:, j]) if M.shape[0] >= 3 else np.nan
            if np.isfinite(c):
                C[i, j] = c
    pairs = []
    C = C.copy()
    for _ in range(min(r_inf, r_true)):
        i, j = np.unravel_index(np.argmax(C), C.shape)
        pairs.append((int(i), int(j)))
        C[i, :] = -np.inf
        C[:, j] = -np.inf
    return sorted(pairs)


def clique_error_rates(estimated, truth, p: int):
    """False-negative and false-positive rates of a neighbor set.

    Both arguments are iterables of observed indices; p is the number of
    observed nodes.  Returns (fnr, fpr), each None when its denominator
    is empty.
    """
    est = set(estimated)
    tru = set(truth)
    if not est <= set(range(p)) or not tru <= set(range(p)):
        raise InvalidInputError("clique indices outside observed range")
    fn = len(tru - est)
    fp = len(est - tru)
    n_neg = p - len(tru)
    fnr = fn / len(tru) if tru else None
    fpr = fp / n_neg if n_neg else None
    return fnr, fpr


@dataclass(frozen=True)
class EvalReport:
    """Per-replicate evaluation summary, one CSV row per replicate."""

    influence_class: str
    auc: float
    precision: float | None
    recall: float | None
    hidden_correlation: float
    runtime_s: float
    converged: bool

    CSV_HEADER = "class,auc,precision,recall,correlation,time_s,converged"

    def csv_row(self) -> str:
        def fmt(x):
            if x is None or (isinstance(x, float) and not np.isfinite(x)):
                return ""
            return f"{x:.6f}" if isinstance(x, float) else str(x)

        return ",".join(
            [
                self.influence_class,
                fmt(self.auc),
                fmt(self.precision),
                fmt(self.recall),
                fmt(self.hidden_correlation),
                fmt(self.runtime_s),
                str(int(self.converged)),
            ]
        )
