"""Poisson log-normal layer: dataset container, observed fit, pair densities.

The observed fit is a standard variational Poisson log-normal regression: each
site carries a latent Gaussian vector, counts are conditionally Poisson with
log link, and the posterior is approximated by a fully factorized Gaussian.
The latent covariance is profiled out analytically, so the objective is
maximized over the regression coefficients and the per-site variational means
and variances only.  After the fit, the latent layer is standardized to unit
second moment per species and frozen; downstream modules only re-estimate the
dependence structure.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from .exceptions import InvalidInputError

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class CountDataset:
    """Aligned count, covariate and offset matrices for n sites and p species.

    The covariate matrix includes the intercept column by convention.
    """

    counts: np.ndarray
    covariates: np.ndarray | None = None
    offsets: np.ndarray | None = None
    species: tuple[str, ...] | None = None

    def __post_init__(self):
        y = np.asarray(self.counts)
        if y.ndim != 2:
            raise InvalidInputError(f"counts must be 2-dimensional, got shape {y.shape}")
        n, p = y.shape
        if n < 2:
            raise InvalidInputError(f"need at least 2 sites, got {n}")
        if p < 3:
            raise InvalidInputError(f"need at least 3 species, got {p}")
        if not np.issubdtype(y.dtype, np.number) or np.isnan(np.asarray(y, float)).any():
            raise InvalidInputError("counts must be numeric without missing values")
        yf = np.asarray(y, dtype=float)
        if (yf < 0).any() or not np.array_equal(yf, np.round(yf)):
            raise InvalidInputError("counts must be non-negative integers")
        zero = ~yf.any(axis=0)
        if zero.any():
            names = self._names(np.flatnonzero(zero))
            raise InvalidInputError(f"species with all-zero counts: {names}")
        self.counts = yf
        if self.covariates is None:
            self.covariates = np.ones((n, 1))
        self.covariates = np.asarray(self.covariates, dtype=float)
        if self.covariates.ndim != 2 or self.covariates.shape[0] != n:
            raise InvalidInputError(
                f"covariates must be ({n}, d), got shape {self.covariates.shape}"
            )
        if self.offsets is None:
            self.offsets = np.zeros((n, p))
        self.offsets = np.asarray(self.offsets, dtype=float)
        if self.offsets.shape != (n, p):
            raise InvalidInputError(
                f"offsets must have shape ({n}, {p}), got {self.offsets.shape}"
            )
        if self.species is not None:
            self.species = tuple(self.species)
            if len(self.species) != p:
                raise InvalidInputError(
                    f"{len(self.species)} species names for {p} count columns"
                )

    def _names(self, idx):
        if self.species is None:
            return [int(i) for i in idx]
        return [self.species[i] for i in idx]

    @property
    def n_sites(self) -> int:
        return self.counts.shape[0]

    @property
    def n_species(self) -> int:
        return self.counts.shape[1]

    def subset(self, rows) -> "CountDataset":
        rows = np.asarray(rows)
        return CountDataset(
            counts=self.counts[rows],
            covariates=self.covariates[rows],
            offsets=self.offsets[rows],
            species=self.species,
        )


@dataclass
class PlnFit:
    """Frozen observed-layer fit with standardized latent moments."""

    theta: np.ndarray       # (d, p) regression coefficients
    sigma: np.ndarray       # (p,) per-species latent scale
    M_obs: np.ndarray       # (n, p) standardized variational means
    S_obs: np.ndarray       # (n, p) standardized variational variances
    elbo: float
    recon: float            # expected count log likelihood under the frozen layer
    converged: bool
    elbo_trace: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def n_sites(self) -> int:
        return self.M_obs.shape[0]


def _pln_objective(x, y, xmat, offs, n, p, d):
    theta = x[: d * p].reshape(d, p)
    m = x[d * p : d * p + n * p].reshape(n, p)
    logs = x[d * p + n * p :].reshape(n, p)
    s = np.exp(logs)
    lin = offs + xmat @ theta + m
    with np.errstate(over="ignore"):
        a = np.exp(lin + s / 2.0)
    sigma_hat = (m.T @ m + np.diag(s.sum(axis=0))) / n
    try:
        chol = np.linalg.cholesky(sigma_hat)
    except np.linalg.LinAlgError:
        return np.inf, np.zeros_like(x)
    logdet = 2.0 * np.log(np.diagonal(chol)).sum()
    inv = np.linalg.inv(sigma_hat)
    elbo = float(
        (y * lin - a).sum() - n / 2.0 * logdet + 0.5 * logs.sum()
    )
    if not np.isfinite(elbo):
        return np.inf, np.zeros_like(x)
    resid = y - a
    g_theta = xmat.T @ resid
    g_m = resid - m @ inv
    g_logs = -0.5 * a * s - 0.5 * s * np.diagonal(inv)[None, :] + 0.5
    grad = -np.concatenate([g_theta.ravel(), g_m.ravel(), g_logs.ravel()])
    return -elbo, grad


def fit_pln(data: CountDataset, max_iter: int = 400, tol: float = 1e-8) -> PlnFit:
    """Fit the observed Poisson log-normal layer and freeze its moments.

    Returns regression coefficients, per-species latent scales sigma_j, and
    the standardized variational moments M_obs = m / sigma, S_obs = s / sigma^2
    whose per-species mean second moment is exactly one.
    """
    y = data.counts
    xmat = data.covariates
    offs = data.offsets
    n, p = y.shape
    d = xmat.shape[1]
    logy = np.log1p(y) - offs
    if d > 0:
        theta0, *_ = np.linalg.lstsq(xmat, logy, rcond=None)
        m0 = logy - xmat @ theta0
    else:
        theta0 = np.zeros((0, p))
        m0 = logy
    x0 = np.concatenate(
        [theta0.ravel(), m0.ravel(), np.full(n * p, math.log(0.1))]
    )
    bounds = (
        [(-50.0, 50.0)] * (d * p) + [(-50.0, 50.0)] * (n * p) + [(-25.0, 15.0)] * (n * p)
    )
    trace = []

    def record(xk):
        trace.append(-_pln_objective(xk, y, xmat, offs, n, p, d)[0])

    res = optimize.minimize(
        _pln_objective,
        x0,
        args=(y, xmat, offs, n, p, d),
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        callback=record,
        options={"maxiter": max_iter, "ftol": tol, "gtol": 1e-8, "maxcor": 25},
    )
    theta = res.x[: d * p].reshape(d, p)
    m = res.x[d * p : d * p + n * p].reshape(n, p)
    s = np.exp(res.x[d * p + n * p :].reshape(n, p))
    sigma = np.sqrt((m * m + s).mean(axis=0))
    lin = offs + xmat @ theta + m
    recon = float(
        (y * lin - np.exp(lin + s / 2.0) - special.gammaln(y + 1.0)).sum()
    )
    const = float(special.gammaln(y + 1.0).sum())
    return PlnFit(
        theta=theta,
        sigma=sigma,
        M_obs=m / sigma,
        S_obs=s / sigma**2,
        elbo=float(-res.fun) - const,
        recon=recon,
        converged=bool(res.success),
        elbo_trace=np.asarray(trace) - const,
    )


_GH_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gh_nodes(k: int):
    if k not in _GH_CACHE:
        nodes, weights = np.polynomial.hermite.hermgauss(k)
        _GH_CACHE[k] = (nodes, np.log(weights))
    return _GH_CACHE[k]


def _pair_modes(y1, y2, mu1, mu2, o11, o22, o12):
    """Vectorized Newton search for the mode of the joint integrand."""
    z1 = mu1.copy()
    z2 = mu2.copy()
    for _ in range(100):
        e1 = np.exp(np.clip(z1, -np.inf, 60.0))
        e2 = np.exp(np.clip(z2, -np.inf, 60.0))
        g1 = y1 - e1 - o11 * (z1 - mu1) - o12 * (z2 - mu2)
        g2 = y2 - e2 - o12 * (z1 - mu1) - o22 * (z2 - mu2)
        h11 = e1 + o11
        h22 = e2 + o22
        det = h11 * h22 - o12 * o12
        d1 = (h22 * g1 - o12 * g2) / det
        d2 = (h11 * g2 - o12 * g1) / det
        step = np.maximum(1.0, np.hypot(d1, d2) / 4.0)
        z1 = z1 + d1 / step
        z2 = z2 + d2 / step
        if max(np.abs(d1).max(), np.abs(d2).max()) < 1e-11:
            break
    return z1, z2


def _pair_logpdf_fixed(y1, y2, mu1, mu2, s11, s22, s12, k):
    """Log density on a fixed k x k mode-centered Gauss-Hermite grid."""
    det_s = s11 * s22 - s12 * s12
    o11 = s22 / det_s
    o22 = s11 / det_s
    o12 = -s12 / det_s
    z1hat, z2hat = _pair_modes(y1, y2, mu1, mu2, o11, o22, o12)
    e1 = np.exp(z1hat)
    e2 = np.exp(z2hat)
    # curvature of the log integrand at the mode, then its inverse Cholesky
    h11 = e1 + o11
    h22 = e2 + o22
    det_h = h11 * h22 - o12 * o12
    c11 = h22 / det_h
    c22 = h11 / det_h
    c12 = -o12 / det_h
    l11 = np.sqrt(c11)
    l21 = c12 / l11
    l22 = np.sqrt(np.maximum(c22 - l21 * l21, 1e-300))
    nodes, logw = _gh_nodes(k)
    xi = nodes[:, None]
    xj = nodes[None, :]
    lw = logw[:, None] + logw[None, :] + xi * xi + xj * xj
    rt2 = math.sqrt(2.0)
    z1 = z1hat[:, None, None] + rt2 * l11[:, None, None] * xi[None, :, :]
    z2 = (
        z2hat[:, None, None]
        + rt2 * (l21[:, None, None] * xi[None, :, :] + l22[:, None, None] * xj[None, :, :])
    )
    dz1 = z1 - mu1[:, None, None]
    dz2 = z2 - mu2[:, None, None]
    quad = (
        o11[:, None, None] * dz1 * dz1
        + 2.0 * o12[:, None, None] * dz1 * dz2
        + o22[:, None, None] * dz2 * dz2
    )
    with np.errstate(over="ignore"):
        logf = (
            y1[:, None, None] * z1
            - np.exp(z1)
            + y2[:, None, None] * z2
            - np.exp(z2)
            - 0.5 * quad
        )
    logf += lw[None, :, :]
    top = logf.max(axis=(1, 2))
    body = np.log(np.exp(logf - top[:, None, None]).sum(axis=(1, 2))) + top
    return (
        body
        + math.log(2.0)
        + np.log(l11 * l22)
        - special.gammaln(y1 + 1.0)
        - special.gammaln(y2 + 1.0)
        - _LOG_2PI
        - 0.5 * np.log(det_s)
    )


def bivariate_pln_logpdf_many(
    y1,
    y2,
    mu1,
    mu2,
    s11,
    s22,
    s12,
    start_nodes: int = 30,
    log_tol: float = 1e-7,
    max_nodes: int = 240,
    chunk: int = 4096,
) -> np.ndarray:
    """Joint log density of count pairs under a latent bivariate Gaussian.

    All arguments broadcast to a common shape; the quadrature is mode centered
    and the per-axis node count doubles until the log value moves by less than
    log_tol.
    """
    y1, y2, mu1, mu2, s11, s22, s12 = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (y1, y2, mu1, mu2, s11, s22, s12))
    )
    shape = y1.shape
    args = [a.ravel() for a in (y1, y2, mu1, mu2, s11, s22, s12)]
    if (args[0] < 0).any() or (args[1] < 0).any():
        raise InvalidInputError("counts must be non-negative")
    if (args[4] <= 0).any() or (args[5] <= 0).any():
        raise InvalidInputError("variances must be strictly positive")
    if (args[6] * args[6] >= args[4] * args[5]).any():
        raise InvalidInputError("covariance matrix must be positive definite")
    total = args[0].size
    out = np.empty(total)
    for lo in range(0, total, chunk):
        sl = slice(lo, min(lo + chunk, total))
        part = [a[sl] for a in args]
        k = start_nodes
        val = _pair_logpdf_fixed(*part, k)
        while k < max_nodes:
            k *= 2
            nxt = _pair_logpdf_fixed(*part, k)
            done = np.abs(nxt - val).max() < log_tol
            val = nxt
            if done:
                break
        out[sl] = val
    return out.reshape(shape)


def bivariate_pln_logpdf(y1, y2, mu1, mu2, s11, s22, s12) -> float:
    """Scalar convenience wrapper around bivariate_pln_logpdf_many."""
    for name, val in (("y1", y1), ("y2", y2)):
        if val < 0 or float(val) != int(val):
            raise InvalidInputError(f"{name} must be a non-negative integer, got {val!r}")
    return float(
        bivariate_pln_logpdf_many(
            np.array([float(y1)]),
            np.array([float(y2)]),
            np.array([float(mu1)]),
            np.array([float(mu2)]),
            np.array([float(s11)]),
            np.array([float(s22)]),
            np.array([float(s12)]),
        )[0]
    )
