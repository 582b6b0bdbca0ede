#!/usr/bin/env python3
"""Desk-scale reproduction of the simulation tables.

Runs the Monte Carlo studies for the built-in scenarios and prints one
table-shaped block per scenario/estimator. Defaults are sized for a quick
look (200 replicates); pass --reps 1000 for the full-size runs.

Dimension note: the binary-z tables count regressors, so their "p = 200"
column corresponds to --p 100 here (f = g has 2p+1 non-constant columns);
the continuous-z tables' "p = 60" corresponds to --p 54.
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from cstekit.simlab import MCConfig, run_mc


def print_block(m):
    print(f"\n[{m.scenario} | {m.estimator}] n_success={m.n_success} n_failed={m.n_failed}")
    print(f"{'z0':>6} {'Bias':>8} {'sqrt(Var)':>10} {'sqrt(EVar)':>11} {'Cov90':>7} {'Cov95':>7}")
    for i, z0 in enumerate(m.z0):
        print(
            f"{z0:>6} {m.bias[i]:>8.3f} {np.sqrt(m.var[i]):>10.3f} "
            f"{np.sqrt(m.evar[i]):>11.3f} {m.cov90[i]:>7.3f} {m.cov95[i]:>7.3f}"
        )


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--reps", type=int, default=200)
    ap.add_argument("--seed", type=int, default=20260810)
    ap.add_argument("--jobs", type=int, default=None)
    ap.add_argument("--out", default=None, help="optional JSON output path")
    ap.add_argument(
        "--studies",
        nargs="*",
        default=["binary", "continuous", "competitors"],
        choices=["binary", "continuous", "competitors"],
    )
    args = ap.parse_args()

    runs = []
    if "binary" in args.studies:
        runs += [("C1", "proposed", 100), ("C2", "proposed", 100), ("C3", "proposed", 100)]
    if "continuous" in args.studies:
        runs += [("C4", "proposed", 54), ("C5", "proposed", 54)]
    if "competitors" in args.studies:
        runs += [
            ("C4", "aipw_kernel_full", 54),
            ("C5", "aipw_kernel_full", 54),
            ("C4", "aipw_kernel_cf4", 54),
            ("C5", "aipw_kernel_cf4", 54),
        ]

    collected = {}
    for scenario, estimator, p in runs:
        t0 = time.time()
        m = run_mc(
            MCConfig(
                scenario=scenario, n=500, p=p, n_reps=args.reps,
                seed=args.seed, estimator=estimator, n_jobs=args.jobs,
            )
        )
        print_block(m)
        print(f"  ({time.time() - t0:.1f} s)")
        collected[f"{scenario}:{estimator}"] = m.to_dict()

    if args.out:
        Path(args.out).write_text(json.dumps(collected, indent=2, sort_keys=True))
        print(f"\nwrote {args.out}")


if __name__ == "__main__":
    main()
