"""End-to-end drivers: candidate search, best-bound fits, benchmarks.

``fit_network`` is the main entry point: fit the observed count layer
once, build candidate clique assignments for the hidden actors, run one
VEM per candidate, and keep the run with the highest final bound.
Degenerate runs (a hidden actor whose posterior mean collapses to a
constant) are excluded from the selection but reported, as are runs
that die with a numerical error.

``benchmark`` wires the simulator to ``fit_network`` and the metrics,
producing one EvalReport per replicate plus per-class aggregates.
"""

from __future__ import annotations

import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DegeneracyError, InvalidInputError, NestorError
from .initialization import InitState, candidate_cliques, init_params, resample_cliques
from .metrics import EvalReport, auc_edges, hidden_correlation, hidden_link_pr
from .pln import CountDataset, PlnFit, fit_pln
from .simulate import SimReplicate, make_replicate
from .vem import VemConfig, VemState, alpha_upper_bound, run_vem

DEFAULT_C_SUP = 0.8


@dataclass(frozen=True)
class FitConfig:
    """Knobs for one network fit.

    alpha may be a float step size or "auto", which plugs the observed
    dimensions into the step-size bound with c_sup = DEFAULT_C_SUP.
    n_resamples > 0 widens the candidate pool with row subsamples.
    """

    r: int = 0
    alpha: float | str = 0.1
    eps: float = 1e-3
    max_iter: int = 100
    card: int | None = None
    n_resamples: int = 0
    resample_frac: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.r < 0:
            raise InvalidInputError(f"r must be >= 0, got {self.r}")
        if isinstance(self.alpha, str):
            if self.alpha != "auto":
                raise InvalidInputError(f"alpha must be a float or 'auto', got {self.alpha!r}")
        elif not 0.0 < self.alpha <= 1.0:
            raise InvalidInputError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.n_resamples < 0:
            raise InvalidInputError("n_resamples must be >= 0")


def resolve_alpha(config: FitConfig, n: int, q: int) -> float:
    if config.alpha == "auto":
        return min(1.0, alpha_upper_bound(DEFAULT_C_SUP, n, q))
    return float(config.alpha)


@dataclass(frozen=True)
class CandidateRun:
    """Outcome of one VEM run; state kept only for successful runs."""

    index: int
    cliques: tuple
    outcome: str  # "ok" | "degenerate" | "failed"
    elbo: float | None
    detail: str = ""
    state: VemState | None = field(default=None, repr=False)
    init: InitState | None = field(default=None, repr=False)


@dataclass(frozen=True)
class NetworkFit:
    pln: PlnFit = field(repr=False)
    state: VemState = field(repr=False)
    init: InitState = field(repr=False)
    runs: tuple
    alpha: float

    @property
    def elbo(self) -> float:
        return float(self.state.elbo_trace[-1])

    @property
    def cliques(self) -> tuple:
        return self.init.cliques


def _candidate_pool(fit: PlnFit, config: FitConfig, cliques) -> list:
    if config.r == 0:
        return [()]
    if cliques is not None:
        pool = [tuple(tuple(sorted(c)) for c in cand) for cand in cliques]
        for cand in pool:
            if len(cand) != config.r:
                raise InvalidInputError(
                    f"candidate {cand} has {len(cand)} cliques, expected r={config.r}"
                )
        if not pool:
            raise InvalidInputError("no candidate cliques supplied")
        return pool
    if config.n_resamples:
        pool = resample_cliques(
            fit.M_obs,
            config.r,
            n_resamples=config.n_resamples,
            frac=config.resample_frac,
            card=config.card,
            seed=config.seed,
        )
        if pool:
            return pool
        warnings.warn("resampling produced no candidates; falling back to full data")
    return candidate_cliques(fit.M_obs, config.r, card=config.card)


def fit_network(
    data: CountDataset | None,
    config: FitConfig,
    cliques=None,
    pln_fit: PlnFit | None = None,
    threads: int = 1,
) -> NetworkFit:
    """Fit the full model, selecting the best candidate by final bound."""
    fit = pln_fit if pln_fit is not None else fit_pln(data)
    n, p = fit.M_obs.shape
    pool = _candidate_pool(fit, config, cliques)
    alpha = resolve_alpha(config, n, p + config.r)
    vem_config = VemConfig(
        r=config.r, alpha=alpha, eps=config.eps, max_iter=config.max_iter
    )

    def one(item):
        idx, cand = item
        try:
            init = init_params(fit.M_obs, cand)
            state = run_vem(fit, init, vem_config)
        except (NestorError, np.linalg.LinAlgError) as err:
            return CandidateRun(idx, cand, "failed", None, detail=str(err))
        score = float(state.elbo_trace[-1])
        if state.degenerate:
            return CandidateRun(
                idx, cand, "degenerate", score,
                detail=f"actors {state.degenerate} collapsed",
                state=state, init=init,
            )
        return CandidateRun(idx, cand, "ok", score, state=state, init=init)

    items = list(enumerate(pool))
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool_exec:
            runs = list(pool_exec.map(one, items))
    else:
        runs = [one(item) for item in items]

    clean = [run for run in runs if run.outcome == "ok"]
    if not clean:
        reasons = "; ".join(f"#{run.index}: {run.outcome} {run.detail}" for run in runs)
        raise DegeneracyError(f"no usable candidate run ({reasons})")
    best = max(clean, key=lambda run: run.elbo)
    return NetworkFit(
        pln=fit, state=best.state, init=best.init, runs=tuple(runs), alpha=alpha
    )


def evaluate_replicate(
    rep: SimReplicate,
    mode: str = "blind",
    config: FitConfig | None = None,
    threads: int = 1,
) -> EvalReport:
    """Run inference on one replicate and score it against the truth."""
    if mode not in ("blind", "oracle"):
        raise InvalidInputError(f"mode must be 'blind' or 'oracle', got {mode!r}")
    if config is None:
        config = FitConfig(r=1)
    if config.r != 1:
        raise InvalidInputError("replicate evaluation assumes one hidden actor")
    cliques = [(rep.neighbors_true,)] if mode == "oracle" else None
    t0 = time.perf_counter()
    net = fit_network(CountDataset(rep.Y), config, cliques=cliques, threads=threads)
    runtime = time.perf_counter() - t0
    precision, recall = hidden_link_pr(net.state.P, rep.adjacency)
    return EvalReport(
        influence_class=rep.influence_class,
        auc=auc_edges(net.state.P, rep.adjacency),
        precision=precision,
        recall=recall,
        hidden_correlation=hidden_correlation(
            net.state.M_hidden[:, 0], rep.U[:, rep.hidden_index]
        ),
        runtime_s=runtime,
        converged=net.state.converged,
    )


def benchmark(
    n_reps: int,
    mode: str = "blind",
    p: int = 14,
    n: int = 100,
    seed: int = 0,
    config: FitConfig | None = None,
    threads: int = 1,
) -> tuple:
    """Simulate, infer, and evaluate n_reps replicates.

    Returns (reports, failures); failures are (replicate_index, message)
    pairs for runs that died with a model error rather than a score.
    """
    rep_seeds = np.random.SeedSequence(seed).generate_state(n_reps)
    reports = []
    failures = []
    for i, s in enumerate(rep_seeds):
        rep = make_replicate(p=p, n=n, seed=int(s))
        try:
            reports.append(evaluate_replicate(rep, mode=mode, config=config, threads=threads))
        except NestorError as err:
            failures.append((i, f"{rep.influence_class}: {err}"))
    return reports, failures


def _mean_sd(values):
    vals = [v for v in values if v is not None and np.isfinite(v)]
    if not vals:
        return None, None
    arr = np.asarray(vals, dtype=float)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def aggregate_reports(reports) -> list:
    """Per-class means and sds in Minor/Medium/Major order.

    Missing metric values (undefined precision, degenerate correlation)
    are dropped from their averages, matching how the per-replicate
    reports mark them.
    """
    rows = []
    for cls in ("Minor", "Medium", "Major"):
        group = [rep for rep in reports if rep.influence_class == cls]
        if not group:
            continue
        row = {"class": cls, "n": len(group)}
        for name in ("auc", "precision", "recall", "hidden_correlation", "runtime_s"):
            mean, sd = _mean_sd(getattr(rep, name) for rep in group)
            row[f"{name}_mean"] = mean
            row[f"{name}_sd"] = sd
        rows.append(row)
    return rows
