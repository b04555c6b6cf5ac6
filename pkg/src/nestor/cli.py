"""Command-line frontend: fit, select, simulate, benchmark.

Exit codes: 0 success; 2 input or usage error; 3 numerical degeneracy;
4 the fit ran but did not meet the convergence threshold (outputs are
still written).  The NESTOR_THREADS environment variable caps the
worker pool regardless of --threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .exceptions import InvalidInputError, NestorError
from .io import (
    fmt,
    read_cliques,
    read_counts,
    read_covariates,
    read_offsets,
    sha256_file,
    write_csv,
    write_manifest,
)
from .metrics import EvalReport
from .model_select import CrossValConfig, select_r
from .pipeline import FitConfig, aggregate_reports, benchmark, fit_network
from .pln import CountDataset
from .simulate import make_replicate


def resolve_threads(requested: int | None) -> int:
    cap_text = os.environ.get("NESTOR_THREADS")
    cap = None
    if cap_text:
        try:
            cap = max(1, int(cap_text))
        except ValueError:
            raise InvalidInputError(
                f"NESTOR_THREADS must be an integer, got {cap_text!r}"
            ) from None
    if requested is None:
        return cap or 1
    if requested < 1:
        raise InvalidInputError(f"--threads must be >= 1, got {requested}")
    return min(requested, cap) if cap else requested


def _parse_alpha(text: str):
    if text == "auto":
        return "auto"
    try:
        return float(text)
    except ValueError:
        raise InvalidInputError(f"--alpha must be a float or 'auto', got {text!r}") from None


def _load_dataset(args) -> CountDataset:
    counts, species = read_counts(args.counts)
    covariates = None
    offsets = None
    if args.covariates:
        covariates, _ = read_covariates(args.covariates, counts.shape[0])
    if args.offsets:
        offsets = read_offsets(args.offsets, *counts.shape)
    return CountDataset(counts, covariates, offsets, species=species)


def _input_digests(args) -> dict:
    files = {"counts": args.counts}
    for key in ("covariates", "offsets", "cliques"):
        value = getattr(args, key, None)
        if value:
            files[key] = value
    return {name: sha256_file(path) for name, path in files.items()}


def _node_names(species, r) -> list:
    return list(species) + [f"H{h + 1}" for h in range(r)]


def cmd_fit(args) -> int:
    t0 = time.perf_counter()
    data = _load_dataset(args)
    config = FitConfig(
        r=args.r,
        alpha=_parse_alpha(args.alpha),
        eps=args.eps,
        max_iter=args.max_iter,
        n_resamples=args.resample,
        seed=args.seed,
    )
    cliques = None
    if args.cliques:
        cliques = [read_cliques(args.cliques, data.species)]
    net = fit_network(data, config, cliques=cliques, threads=resolve_threads(args.threads))

    out = Path(args.out)
    names = _node_names(data.species, config.r)
    state = net.state
    q = state.dim
    edge_rows = [
        (names[k], names[l], fmt(state.P[k, l]), fmt(state.omega_offdiag[k, l]))
        for k in range(q)
        for l in range(k + 1, q)
    ]
    write_csv(out / "edges.csv", "edges", ("k", "l", "P_kl", "omega_kl"), edge_rows)
    if config.r > 0:
        hidden_rows = [
            (site, f"H{h + 1}", fmt(state.M_hidden[site, h]), fmt(state.S_hidden[h]))
            for site in range(state.M_hidden.shape[0])
            for h in range(config.r)
        ]
        write_csv(
            out / "hidden_means.csv",
            "hidden_means",
            ("site", "actor", "M_h", "S_h"),
            hidden_rows,
        )
    write_csv(
        out / "trace.csv",
        "trace",
        ("iteration", "elbo", "max_change", "edge_mass"),
        [
            (row["iteration"], fmt(row["elbo"], 12), fmt(row["max_change"], 6), fmt(row["edge_mass"], 12))
            for row in state.trace
        ],
    )
    for run in net.runs:
        label = ",".join("|".join(names[j] for j in cl) for cl in run.cliques) or "-"
        print(f"candidate {run.index} [{label}]: {run.outcome}"
              + (f" (bound {run.elbo:.4f})" if run.elbo is not None else f" ({run.detail})"))
    chosen = [[names[j] for j in cl] for cl in net.cliques]
    print(f"kept candidate with bound {net.elbo:.4f}; cliques {chosen}")
    if not state.converged:
        print(f"warning: stopped at max_iter={config.max_iter} before reaching eps={config.eps}",
              file=sys.stderr)
    write_manifest(
        out,
        {
            "command": "fit",
            "version": __version__,
            "seed": args.seed,
            "config": asdict(config),
            "inputs": _input_digests(args),
            "converged": bool(state.converged),
            "elbo": net.elbo,
            "cliques": chosen,
            "wall_clock_s": round(time.perf_counter() - t0, 3),
        },
    )
    return 0 if state.converged else 4


def cmd_select(args) -> int:
    t0 = time.perf_counter()
    data = _load_dataset(args)
    try:
        grid = tuple(int(tok) for tok in args.r_grid.split(","))
    except ValueError:
        raise InvalidInputError(f"--r-grid must be comma-separated ints, got {args.r_grid!r}") from None
    config = CrossValConfig(
        r_grid=grid,
        n_folds=args.folds,
        tree_draws=args.trees,
        seed=args.seed,
        alpha=_parse_alpha(args.alpha) if args.alpha != "auto" else 0.1,
    )
    result = select_r(data, config)
    out = Path(args.out)
    pcl_rows = []
    for entry in result.table:
        for v, val in enumerate(entry["folds"]):
            pcl_rows.append((entry["r"], v, fmt(val, 10)))
        pcl_rows.append((entry["r"], "total", fmt(entry["pcl"], 10)))
    write_csv(out / "pcl.csv", "pcl", ("r", "fold", "pcl"), pcl_rows)
    print(f"selected r = {result.r_best}")
    for entry in result.table:
        print(f"  r={entry['r']}: PCL {entry['pcl']:.4f}")
    write_manifest(
        out,
        {
            "command": "select",
            "version": __version__,
            "seed": args.seed,
            "config": asdict(config),
            "inputs": _input_digests(args),
            "r_best": result.r_best,
            "wall_clock_s": round(time.perf_counter() - t0, 3),
        },
    )
    return 0


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    out = Path(args.out)
    rep_seeds = np.random.SeedSequence(args.seed).generate_state(args.reps)
    class_counts = {"Minor": 0, "Medium": 0, "Major": 0}
    for i, s in enumerate(rep_seeds):
        rep = make_replicate(p=args.p, n=args.n, seed=int(s))
        class_counts[rep.influence_class] += 1
        rep_dir = out / f"rep_{i:03d}"
        names = [f"s{j + 1:02d}" for j in range(args.p)]
        write_csv(
            rep_dir / "counts.csv",
            "counts",
            names,
            [[int(v) for v in row] for row in rep.Y],
        )
        truth = {
            "seed": int(s),
            "hidden_index": rep.hidden_index,
            "influence_class": rep.influence_class,
            "hidden_degree": rep.hidden_degree,
            "adjacency": rep.adjacency.astype(int).tolist(),
            "sigma": rep.sigma_true.tolist(),
            "theta": rep.theta_true.tolist(),
        }
        with open(rep_dir / "truth.json", "w", encoding="utf-8") as fh:
            json.dump(truth, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"rep_{i:03d}: {rep.influence_class} (hub degree {rep.hidden_degree})")
    print(f"class counts: {class_counts}")
    write_manifest(
        out,
        {
            "command": "simulate",
            "version": __version__,
            "seed": args.seed,
            "config": {"p": args.p, "n": args.n, "reps": args.reps},
            "inputs": {},
            "class_counts": class_counts,
            "wall_clock_s": round(time.perf_counter() - t0, 3),
        },
    )
    return 0


def cmd_benchmark(args) -> int:
    t0 = time.perf_counter()
    reports, failures = benchmark(
        args.reps,
        mode=args.mode,
        p=args.p,
        n=args.n,
        seed=args.seed,
        threads=resolve_threads(args.threads),
    )
    out = Path(args.out)
    write_csv(
        out / "reports.csv",
        "benchmark",
        EvalReport.CSV_HEADER.split(","),
        [rep.csv_row().split(",") for rep in reports],
    )
    rows = aggregate_reports(reports)
    write_csv(
        out / "summary.csv",
        "benchmark",
        (
            "class", "n",
            "auc_mean", "auc_sd",
            "precision_mean", "precision_sd",
            "recall_mean", "recall_sd",
            "correlation_mean", "correlation_sd",
            "time_mean", "time_sd",
        ),
        [
            (
                row["class"], row["n"],
                fmt(row["auc_mean"]), fmt(row["auc_sd"]),
                fmt(row["precision_mean"]), fmt(row["precision_sd"]),
                fmt(row["recall_mean"]), fmt(row["recall_sd"]),
                fmt(row["hidden_correlation_mean"]), fmt(row["hidden_correlation_sd"]),
                fmt(row["runtime_s_mean"]), fmt(row["runtime_s_sd"]),
            )
            for row in rows
        ],
    )
    for row in rows:
        print(
            f"{row['class']}: n={row['n']} AUC {row['auc_mean']:.3f} ({row['auc_sd']:.3f})"
        )
    for index, message in failures:
        print(f"replicate {index} failed: {message}", file=sys.stderr)
    if failures:
        print(f"{len(failures)} of {args.reps} replicates failed", file=sys.stderr)
    write_manifest(
        out,
        {
            "command": "benchmark",
            "version": __version__,
            "seed": args.seed,
            "config": {"mode": args.mode, "reps": args.reps, "p": args.p, "n": args.n},
            "inputs": {},
            "n_failures": len(failures),
            "wall_clock_s": round(time.perf_counter() - t0, 3),
        },
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nestor",
        description="Infer conditional dependency networks of species counts, "
        "including unobserved actors.",
    )
    parser.add_argument("--version", action="version", version=f"nestor {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit a network with r hidden actors")
    fit.add_argument("counts", help="counts.csv (header of species names)")
    fit.add_argument("--covariates", help="covariates.csv aligned by row")
    fit.add_argument("--offsets", help="offsets.csv, same shape as counts")
    fit.add_argument("--r", type=int, default=0, help="number of hidden actors")
    fit.add_argument("--alpha", default="0.1", help="tempering step in (0,1] or 'auto'")
    fit.add_argument("--eps", type=float, default=1e-3)
    fit.add_argument("--max-iter", type=int, default=100)
    fit.add_argument("--cliques", help="file with one clique of species names per line")
    fit.add_argument("--resample", type=int, default=0, metavar="N",
                     help="widen the candidate pool with N row subsamples")
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--threads", type=int, default=None)
    fit.add_argument("--out", required=True)
    fit.set_defaults(func=cmd_fit)

    select = sub.add_parser("select", help="choose r by cross-validated PCL")
    select.add_argument("counts")
    select.add_argument("--covariates")
    select.add_argument("--offsets")
    select.add_argument("--r-grid", default="0,1,2,3")
    select.add_argument("--folds", type=int, default=10)
    select.add_argument("--trees", type=int, default=100, help="tree draws per fold")
    select.add_argument("--alpha", default="0.1")
    select.add_argument("--seed", type=int, default=0)
    select.add_argument("--out", required=True)
    select.set_defaults(func=cmd_select)

    sim = sub.add_parser("simulate", help="write synthetic hidden-hub replicates")
    sim.add_argument("--p", type=int, default=14, help="observed species per replicate")
    sim.add_argument("--n", type=int, default=100, help="sites per replicate")
    sim.add_argument("--reps", type=int, default=1)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True)
    sim.set_defaults(func=cmd_simulate)

    bench = sub.add_parser("benchmark", help="simulate, infer, and score replicates")
    bench.add_argument("--mode", choices=("blind", "oracle"), default="blind")
    bench.add_argument("--reps", type=int, default=60)
    bench.add_argument("--p", type=int, default=14)
    bench.add_argument("--n", type=int, default=100)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--threads", type=int, default=None)
    bench.add_argument("--out", required=True)
    bench.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        # argparse exits 2 on usage errors and 0 on --help/--version
        return int(err.code or 0)
    try:
        return args.func(args)
    except InvalidInputError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (NestorError, np.linalg.LinAlgError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
