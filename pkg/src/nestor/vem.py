"""Variational EM over the tree-structured latent layer.

Alternates closed-form M-step updates of the edge weights beta and the
edge-wise precision parameters with variational E-step updates of the
tree posterior (through tempered variational weights beta_tilde) and of
the hidden latent coordinates.  The observed-site posterior moments stay
frozen at the values returned by the count-layer fit; only their rescaled
second-moment matrix enters the updates.

Hidden coordinates occupy the last ``r`` indices of every q x q array.
Hidden-hidden edges are structural zeros (weights pinned at the log
floor), which keeps the hidden block of every tree precision diagonal.
"""

import math
import sys
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    ConfigurationError,
    DegeneracyError,
    InvalidInputError,
    TemperingError,
)
from .pln import PlnFit
from .tree_algebra import (
    LOG_WEIGHT_FLOOR,
    EdgeWeightMatrix,
    edge_marginals,
    log_meila_matrix,
    log_partition,
)

LOG_MAX_DOUBLE = math.log(sys.float_info.max)

# |ssd_kl|/n above this is treated as collinearity: the precision update
# divides by 1 - (ssd/n)^2, and anything this close to 1 only arises when a
# hidden actor has glued itself onto a single observed coordinate.
SSD_RATIO_GUARD = 1.0 - 1e-12

# Var(M_h) below e^-20 marks a hidden actor whose posterior mean collapsed.
DEGENERATE_LOG_VAR = -20.0

_FLOOR_PAD = 1e-9


@dataclass(frozen=True)
class VemConfig:
    """Settings for one VEM run.

    r is the number of hidden actors, alpha the tempering exponent applied
    to the Gaussian statistics in the variational weight update, eps the
    convergence tolerance on parameter change, max_iter the iteration cap.
    """

    r: int = 0
    alpha: float = 0.1
    eps: float = 1e-3
    max_iter: int = 100

    def __post_init__(self):
        if not isinstance(self.r, (int, np.integer)) or self.r < 0:
            raise ConfigurationError(f"r must be a nonnegative integer, got {self.r!r}")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in (0, 1], got {self.alpha!r}")
        if self.eps <= 0.0:
            raise ConfigurationError(f"eps must be positive, got {self.eps!r}")
        if self.max_iter < 1:
            raise ConfigurationError(f"max_iter must be at least 1, got {self.max_iter!r}")


@dataclass(frozen=True)
class OmegaEstimate:
    """Edge-wise precision parameters shared across all trees.

    omega_offdiag holds the off-diagonal precision entries (zero diagonal),
    r_offdiag the correlation parameters ssd_kl / n they were derived from,
    edge_logdet the per-edge log-determinant contributions log(1 - r^2).
    Entries skipped at construction (structurally absent edges) are zero in
    all three.
    """

    omega_offdiag: np.ndarray
    r_offdiag: np.ndarray
    edge_logdet: np.ndarray

    def tree_diagonal(self, adjacency) -> np.ndarray:
        """Diagonal of the precision of one spanning tree given its adjacency."""
        adj = np.asarray(adjacency, dtype=bool)
        if adj.shape != self.r_offdiag.shape:
            raise InvalidInputError(
                f"adjacency shape {adj.shape} does not match {self.r_offdiag.shape}"
            )
        x2 = self.r_offdiag**2
        return 1.0 + np.where(adj, x2 / (1.0 - x2), 0.0).sum(axis=1)


@dataclass
class VemState:
    """Snapshot of a VEM run: parameters, variational moments, and trace."""

    beta: EdgeWeightMatrix
    beta_tilde: EdgeWeightMatrix
    P: np.ndarray
    omega_offdiag: np.ndarray
    r_offdiag: np.ndarray
    edge_logdet: np.ndarray
    expected_prec: np.ndarray
    ssd: np.ndarray
    M_hidden: np.ndarray
    S_hidden: np.ndarray
    elbo_trace: np.ndarray
    trace: list = field(default_factory=list)
    converged: bool = False
    n_iter: int = 0
    degenerate: tuple = ()

    @property
    def r(self) -> int:
        return self.M_hidden.shape[1]

    @property
    def dim(self) -> int:
        return self.P.shape[0]


def _structural_mask(beta: EdgeWeightMatrix) -> np.ndarray:
    mask = beta.logw <= LOG_WEIGHT_FLOOR + _FLOOR_PAD
    np.fill_diagonal(mask, True)
    return mask


def compute_ssd(M, S) -> np.ndarray:
    """Second-moment matrix of the latent posterior, diagonal forced to n.

    Returns M'M + Diag(sum_i S_i), then rescales rows and columns so the
    diagonal is exactly n.  The rescale guards against drift of the fixed
    observed-site scale; off-diagonal ratios |ssd_kl|/n stay strictly
    below 1 or the pair is reported as collinear.
    """
    M = np.asarray(M, dtype=float)
    S = np.asarray(S, dtype=float)
    if M.ndim != 2 or M.shape != S.shape:
        raise InvalidInputError(
            f"means and variances must share an n x q shape, got {M.shape} and {S.shape}"
        )
    if not (S > 0.0).all():
        raise InvalidInputError("posterior variances must be strictly positive")
    n = M.shape[0]
    ssd = M.T @ M + np.diag(S.sum(axis=0))
    scale = np.sqrt(n / np.diag(ssd))
    ssd = ssd * scale[:, None] * scale[None, :]
    np.fill_diagonal(ssd, float(n))
    ratio = np.abs(ssd) / n
    np.fill_diagonal(ratio, 0.0)
    worst = float(ratio.max())
    if worst >= SSD_RATIO_GUARD:
        k, l = np.unravel_index(int(ratio.argmax()), ratio.shape)
        raise DegeneracyError(
            f"latent coordinates {k} and {l} are collinear (|ssd|/n = {worst:.14f})"
        )
    return ssd


def update_omega(ssd, skip=None) -> OmegaEstimate:
    """Closed-form precision update from the current second moments.

    Off-diagonal entries follow omega_kl = -(x) / (1 - x^2) with x = ssd_kl/n;
    the matching per-edge log-determinant contribution is log(1 - x^2).
    Tree-specific diagonals come from OmegaEstimate.tree_diagonal.  Entries
    flagged in ``skip`` (structurally absent edges) are zeroed and never
    checked against the collinearity guard.
    """
    ssd = np.asarray(ssd, dtype=float)
    q = ssd.shape[0]
    n = float(ssd[0, 0])
    if not np.allclose(np.diag(ssd), n, rtol=0.0, atol=1e-6 * max(n, 1.0)):
        raise InvalidInputError("ssd diagonal must be constant (rescale first)")
    if skip is None:
        skip = np.zeros((q, q), dtype=bool)
    else:
        skip = np.asarray(skip, dtype=bool).copy()
    np.fill_diagonal(skip, True)
    x = ssd / n
    x = np.where(skip, 0.0, x)
    np.fill_diagonal(x, 0.0)
    worst = float(np.abs(x).max())
    if worst >= SSD_RATIO_GUARD:
        k, l = np.unravel_index(int(np.abs(x).argmax()), x.shape)
        raise DegeneracyError(
            f"precision update undefined for pair ({k},{l}): |ssd|/n = {worst:.14f}"
        )
    denom = 1.0 - x**2
    omega = -x / denom
    logdet = np.log1p(-(x**2))
    return OmegaEstimate(omega_offdiag=omega, r_offdiag=x, edge_logdet=logdet)


def expected_precision(omega_offdiag, ssd, P) -> np.ndarray:
    """Precision of the latent Gaussian averaged over the tree posterior.

    Off-diagonal entries are P_kl * omega_kl; diagonal entries collect the
    edge corrections 1 + sum_l P_kl x^2 / (1 - x^2).
    """
    omega = np.asarray(omega_offdiag, dtype=float)
    P = np.asarray(P, dtype=float)
    ssd = np.asarray(ssd, dtype=float)
    n = float(ssd[0, 0])
    x = ssd / n
    np.fill_diagonal(x, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = np.where(P > 0.0, P * x**2 / (1.0 - x**2), 0.0)
    out = np.where(P > 0.0, P * omega, 0.0)
    np.fill_diagonal(out, 1.0 + corr.sum(axis=1))
    return out


def _tree_objective(logw, P, active) -> float:
    """E_g log p(T | beta) up to the cross entropy constant: sum P log b - log B."""
    val = float(np.sum(P[active] * logw[active])) / 2.0
    return val - log_partition(EdgeWeightMatrix.from_log_weights(logw))


def update_beta(P, beta, structural=None, safeguard=True) -> EdgeWeightMatrix:
    """M-step fixed-point update of the model edge weights.

    Sets beta_kl = P_kl / M_kl with M the sensitivity matrix of the current
    beta, then renormalizes the largest admissible log weight to 0.  With
    ``safeguard`` the step is backtracked along its log-domain direction
    whenever the full update would lower E_g log p(T | beta); the update
    direction is always an ascent direction of that concave objective, so
    the safeguarded step never loses ground.
    """
    beta = beta if isinstance(beta, EdgeWeightMatrix) else EdgeWeightMatrix.from_weights(beta)
    P = np.asarray(P, dtype=float)
    if P.shape != beta.logw.shape:
        raise InvalidInputError(f"marginals shape {P.shape} does not match beta")
    if structural is None:
        structural = _structural_mask(beta)
    else:
        structural = np.asarray(structural, dtype=bool).copy()
        np.fill_diagonal(structural, True)
    logm = log_meila_matrix(beta)
    dead = (~structural) & np.isneginf(logm) & (P > 0.0)
    if dead.any():
        k, l = np.argwhere(dead)[0]
        raise DegeneracyError(
            f"edge ({k},{l}) carries marginal mass but zero sensitivity"
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        cand = np.where(P > 0.0, np.log(P), -np.inf) - logm
    cand = np.where(structural, LOG_WEIGHT_FLOOR, cand)
    active = ~structural
    finite = cand[active]
    finite = finite[np.isfinite(finite)]
    if finite.size == 0:
        raise DegeneracyError("every admissible edge lost its marginal mass")
    cand = cand - finite.max()
    cand = np.maximum(cand, LOG_WEIGHT_FLOOR)
    np.fill_diagonal(cand, LOG_WEIGHT_FLOOR)

    old = np.maximum(beta.logw, LOG_WEIGHT_FLOOR)
    np.fill_diagonal(old, LOG_WEIGHT_FLOOR)
    if safeguard:
        f_old = _tree_objective(old, P, active)
        step = cand - old
        s = 1.0
        for _ in range(40):
            trial = old + s * step
            if _tree_objective(trial, P, active) >= f_old - 1e-12:
                cand = trial
                break
            s *= 0.5
        else:
            cand = old
    return EdgeWeightMatrix.from_log_weights(cand)


def tempered_log_weights(beta, omega_offdiag, edge_logdet, cross_moment, n, alpha):
    """Raw (unnormalized) tempered variational log weights.

    log bt_kl = log b_kl - alpha * ((n/2) log(1 - x^2)_kl + omega_kl * [M'M]_kl).
    Only the off-diagonal of ``cross_moment`` is read, so the rescaled
    second-moment matrix can be passed directly (posterior variances touch
    its diagonal alone).
    """
    beta = beta if isinstance(beta, EdgeWeightMatrix) else EdgeWeightMatrix.from_weights(beta)
    cm = np.asarray(cross_moment, dtype=float)
    expo = 0.5 * n * np.asarray(edge_logdet, dtype=float)
    expo = expo + np.asarray(omega_offdiag, dtype=float) * cm
    np.fill_diagonal(expo, 0.0)
    return beta.logw - alpha * expo


def update_beta_tilde(
    beta, omega_offdiag, edge_logdet, cross_moment, n, alpha, structural=None
) -> EdgeWeightMatrix:
    """VE-step update of the variational edge weights under tempering.

    Renormalizes the result to max log weight 0.  Raises TemperingError when
    a single tempered step spans more than the representable log range, the
    regime the safe-alpha bound exists to rule out; weights that merely keep
    sliding as the tree posterior saturates are clamped at the floor, where
    their relative mass (below e^-700) is already indistinguishable from zero.
    """
    beta = beta if isinstance(beta, EdgeWeightMatrix) else EdgeWeightMatrix.from_weights(beta)
    if structural is None:
        structural = _structural_mask(beta)
    else:
        structural = np.asarray(structural, dtype=bool).copy()
        np.fill_diagonal(structural, True)
    raw = tempered_log_weights(beta, omega_offdiag, edge_logdet, cross_moment, n, alpha)
    active = ~structural
    step = raw[active] - beta.logw[active]
    spread = float(step.max() - step.min())
    if spread > abs(LOG_WEIGHT_FLOOR):
        raise TemperingError(
            f"one tempered update spans {spread:.0f} logs across edges, past the "
            f"representable range; reduce alpha (currently {alpha:g})"
        )
    raw = np.where(structural, LOG_WEIGHT_FLOOR, raw)
    shift = raw[active].max()
    if not np.isfinite(shift):
        raise DegeneracyError("no admissible edge carries variational weight")
    raw = raw - shift
    raw = np.where(structural, LOG_WEIGHT_FLOOR, raw)
    return EdgeWeightMatrix.from_log_weights(raw)


def update_hidden(M_obs, expected_prec):
    """Exact coordinate update of the hidden posterior given the precision.

    Returns the n x r mean matrix -M_obs Prec_OH / diag(Prec_H) and the r
    per-actor variances 1 / diag(Prec_H).  The hidden block must be diagonal,
    which the structural zeros guarantee for states produced by this module.
    """
    M_obs = np.asarray(M_obs, dtype=float)
    prec = np.asarray(expected_prec, dtype=float)
    p = M_obs.shape[1]
    q = prec.shape[0]
    r = q - p
    if r < 0:
        raise InvalidInputError(
            f"precision has {q} coordinates but there are {p} observed columns"
        )
    if r == 0:
        return np.zeros((M_obs.shape[0], 0)), np.zeros(0)
    hidden = prec[p:, p:]
    off = hidden - np.diag(np.diag(hidden))
    if np.abs(off).max() > 1e-10 * max(1.0, np.abs(np.diag(hidden)).max()):
        raise InvalidInputError("hidden block of the precision must be diagonal")
    d = np.diag(hidden)
    if (d <= 0.0).any():
        h = int(np.argmin(d))
        raise DegeneracyError(f"hidden actor {h} has non-positive precision {d[h]!r}")
    M_h = -(M_obs @ prec[:p, p:]) / d[None, :]
    return M_h, 1.0 / d


def _elbo_parts(beta, beta_tilde, P, edge_logdet, expected_prec, ssd, pln, S_hidden):
    n, _ = pln.M_obs.shape
    q = P.shape[0]
    iu = np.triu_indices(q, 1)
    pu = P[iu]
    pos = pu > 0.0

    logb = log_partition(beta)
    tree_prior = float(np.sum(pu[pos] * beta.logw[iu][pos])) - logb

    logb_tilde = log_partition(beta_tilde)
    tree_entropy = logb_tilde - float(np.sum(pu[pos] * beta_tilde.logw[iu][pos]))

    trace_term = float(np.sum(expected_prec * ssd))
    edge_term = float(np.sum(pu * edge_logdet[iu]))
    gauss_fit = -0.5 * (n * edge_term + trace_term) - 0.5 * n * q * math.log(2.0 * math.pi)

    log_s = float(np.log(pln.S_obs).sum())
    if S_hidden.size:
        log_s += n * float(np.log(S_hidden).sum())
    gauss_entropy = 0.5 * log_s + 0.5 * n * q * (1.0 + math.log(2.0 * math.pi))

    return {
        "recon": float(pln.recon),
        "tree_prior": tree_prior,
        "gauss_fit": gauss_fit,
        "tree_entropy": tree_entropy,
        "gauss_entropy": gauss_entropy,
    }


def elbo_terms(state: VemState, pln: PlnFit, ssd=None) -> dict:
    """The five additive pieces of the objective J, each unit-testable.

    recon: frozen observed-count reconstruction from the count-layer fit.
    tree_prior: E_g log p(T | beta).
    gauss_fit: E_g E_h log p(U | T) under the current precision parameters.
    tree_entropy: entropy of the tree posterior (nonnegative).
    gauss_entropy: entropy of the Gaussian posterior over all latents.
    """
    ssd = state.ssd if ssd is None else np.asarray(ssd, dtype=float)
    return _elbo_parts(
        state.beta,
        state.beta_tilde,
        state.P,
        state.edge_logdet,
        state.expected_prec,
        ssd,
        pln,
        state.S_hidden,
    )


def elbo(state: VemState, pln: PlnFit, ssd=None) -> float:
    return float(sum(elbo_terms(state, pln, ssd).values()))


def growth_coefficient(x: float) -> float:
    """C(x) = x/(1-x) - log sqrt(1-x), the per-edge log-weight growth rate."""
    if not 0.0 < x < 1.0:
        raise InvalidInputError(f"growth coefficient needs x in (0, 1), got {x!r}")
    return x / (1.0 - x) - math.log(math.sqrt(1.0 - x))


def alpha_upper_bound(c_sup: float, n: int, q: int, log_delta: float = LOG_MAX_DOUBLE) -> float:
    """Largest safe tempering exponent for native floats.

    The tempered weight of an edge grows at most like exp(alpha n C(c^2))
    per unit of correlation c, and the partition function multiplies q - 1
    such factors, so alpha <= (log_delta/(q-1) - log(q-1)) / (C(c_sup^2) n)
    keeps it representable.
    """
    if not 0.0 < c_sup < 1.0:
        raise InvalidInputError(f"c_sup must lie in (0, 1), got {c_sup!r}")
    if q < 3:
        raise InvalidInputError(f"need at least 3 nodes, got {q}")
    if n < 1:
        raise InvalidInputError(f"need at least one site, got {n}")
    bound = (log_delta / (q - 1) - math.log(q - 1)) / (growth_coefficient(c_sup**2) * n)
    if bound <= 0.0:
        raise ConfigurationError(
            f"no positive tempering exponent is safe at q = {q} with log_delta = "
            f"{log_delta:g}; enable extended precision or reduce the problem size"
        )
    return bound


def _initial_ssd(M_obs, S_obs, R0, r):
    n, p = M_obs.shape
    obs = compute_ssd(M_obs, S_obs)
    if r == 0:
        return obs
    R0 = np.asarray(R0, dtype=float)
    if R0.shape != (p + r, p + r):
        raise InvalidInputError(
            f"initial correlation must be {(p + r, p + r)}, got {R0.shape}"
        )
    ssd = n * R0.copy()
    ssd[:p, :p] = obs
    np.fill_diagonal(ssd, float(n))
    return ssd


def run_vem(fit: PlnFit, init, config: VemConfig) -> VemState:
    """Run the alternating scheme to convergence or the iteration cap.

    ``init`` provides beta0 (admissible edges uniform, hidden-hidden pinned),
    M_hidden0, and R0; see the init module.  Each iteration performs the
    M-step (update_beta, update_omega) and then the VE-step (update_beta_tilde,
    marginals, update_hidden, compute_ssd), appending the objective J and the
    max parameter change to the trace.  Convergence is declared when the max
    absolute change across the renormalized log variational weights and the
    hidden means drops below config.eps.
    """
    M_obs = np.asarray(fit.M_obs, dtype=float)
    S_obs = np.asarray(fit.S_obs, dtype=float)
    n, p = M_obs.shape
    r = config.r
    q = p + r

    beta = init.beta0
    if not isinstance(beta, EdgeWeightMatrix):
        raise InvalidInputError("init.beta0 must be an EdgeWeightMatrix")
    if beta.dim != q:
        raise InvalidInputError(
            f"init.beta0 has {beta.dim} nodes but the run needs p + r = {q}"
        )
    structural = _structural_mask(beta)
    hidden_pairs = np.zeros((q, q), dtype=bool)
    hidden_pairs[p:, p:] = ~np.eye(r, dtype=bool)
    if not structural[hidden_pairs].all():
        raise InvalidInputError("hidden-hidden edges must start at the log floor")

    M_h = np.asarray(init.M_hidden0, dtype=float).reshape(n, r)
    S_h = np.zeros(0)
    ssd = _initial_ssd(M_obs, S_obs, init.R0, r)

    beta_tilde = beta
    P = edge_marginals(beta_tilde)
    P[structural] = 0.0
    prev_logbt = beta_tilde.logw
    prev_mh = M_h

    iu = np.triu_indices(q, 1)
    elbo_trace = []
    trace = []
    converged = False

    for it in range(1, config.max_iter + 1):
        beta = update_beta(P, beta, structural)
        omega = update_omega(ssd, skip=structural)

        beta_tilde = update_beta_tilde(
            beta, omega.omega_offdiag, omega.edge_logdet, ssd, n, config.alpha, structural
        )
        P = edge_marginals(beta_tilde)
        P[structural] = 0.0
        eprec = expected_precision(omega.omega_offdiag, ssd, P)
        if r:
            M_h, S_h = update_hidden(M_obs, eprec)
            ssd = compute_ssd(
                np.column_stack([M_obs, M_h]),
                np.column_stack([S_obs, np.broadcast_to(S_h, (n, r))]),
            )

        parts = _elbo_parts(
            beta, beta_tilde, P, omega.edge_logdet, eprec, ssd, fit, S_h
        )
        j_val = float(sum(parts.values()))
        delta = float(np.abs(beta_tilde.logw[~structural] - prev_logbt[~structural]).max())
        if r:
            delta = max(delta, float(np.abs(M_h - prev_mh).max()))
        elbo_trace.append(j_val)
        trace.append(
            {
                "iteration": it,
                "elbo": j_val,
                "max_change": delta,
                "edge_mass": float(P[iu].sum()),
            }
        )
        prev_logbt = beta_tilde.logw
        prev_mh = M_h
        if delta < config.eps:
            converged = True
            break

    degenerate = []
    if r:
        var_h = M_h.var(axis=0)
        with np.errstate(divide="ignore"):
            degenerate = [int(h) for h in range(r) if np.log(var_h[h]) < DEGENERATE_LOG_VAR]

    return VemState(
        beta=beta,
        beta_tilde=beta_tilde,
        P=P,
        omega_offdiag=omega.omega_offdiag,
        r_offdiag=omega.r_offdiag,
        edge_logdet=omega.edge_logdet,
        expected_prec=eprec,
        ssd=ssd,
        M_hidden=M_h,
        S_hidden=S_h,
        elbo_trace=np.asarray(elbo_trace),
        trace=trace,
        converged=converged,
        n_iter=it,
        degenerate=tuple(degenerate),
    )
