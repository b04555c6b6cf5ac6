"""Run the oracle and blind benchmarks side by side and print both tables.

Usage:
    python3 scripts/run_benchmark.py --reps 60 --out results/

Writes one summary CSV per mode plus per-replicate rows, and prints the
per-class mean (sd) table for each mode.
"""

import argparse
import sys
import time
import warnings
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from nestor.io import fmt, write_csv
from nestor.metrics import EvalReport
from nestor.pipeline import aggregate_reports, benchmark


def print_table(mode, rows, n_fail):
    print(f"\n{mode} procedure")
    print(f"{'class':<8} {'n':>4} {'AUC':>13} {'precision':>13} {'recall':>13} {'corr':>13} {'time(s)':>13}")
    for row in rows:
        cells = [f"{row['class']:<8}", f"{row['n']:>4}"]
        for name in ("auc", "precision", "recall", "hidden_correlation", "runtime_s"):
            mean, sd = row[f"{name}_mean"], row[f"{name}_sd"]
            cells.append(f"{mean:.2f} ({sd:.2f})" if mean is not None else "-")
        print(" ".join(f"{c:>13}" if i > 1 else c for i, c in enumerate(cells)))
    if n_fail:
        print(f"{n_fail} replicates failed and were excluded")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--reps", type=int, default=60)
    ap.add_argument("--p", type=int, default=14)
    ap.add_argument("--n", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--modes", default="oracle,blind")
    ap.add_argument("--out", default="benchmark_results")
    args = ap.parse_args()

    out = Path(args.out)
    for mode in args.modes.split(","):
        t0 = time.time()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            reports, failures = benchmark(
                args.reps, mode=mode, p=args.p, n=args.n, seed=args.seed
            )
        rows = aggregate_reports(reports)
        print_table(mode, rows, len(failures))
        print(f"wall clock {time.time() - t0:.0f}s")
        write_csv(
            out / f"reports_{mode}.csv",
            "benchmark",
            EvalReport.CSV_HEADER.split(","),
            [rep.csv_row().split(",") for rep in reports],
        )
        write_csv(
            out / f"summary_{mode}.csv",
            "benchmark",
            ("class", "n", "auc_mean", "auc_sd", "recall_mean", "recall_sd",
             "correlation_mean", "correlation_sd"),
            [
                (row["class"], row["n"], fmt(row["auc_mean"]), fmt(row["auc_sd"]),
                 fmt(row["recall_mean"]), fmt(row["recall_sd"]),
                 fmt(row["hidden_correlation_mean"]), fmt(row["hidden_correlation_sd"]))
                for row in rows
            ],
        )


if __name__ == "__main__":
    main()
