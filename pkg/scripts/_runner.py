"""Shared driver for the experiment scripts in this directory."""

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from rrt.simlab import PRESETS, run_experiment, stderr_progress


def run_preset(preset: str, description: str, **overrides) -> None:
    ap = argparse.ArgumentParser(description=description)
    ap.add_argument("--n-reps", type=int, default=500)
    ap.add_argument("--n-jobs", type=int, default=1)
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--out", default="results", help="output directory")
    args = ap.parse_args()

    cfg = replace(PRESETS[preset](**overrides), n_reps=args.n_reps, n_jobs=args.n_jobs, master_seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = run_experiment(cfg, progress=stderr_progress)
    stem = out / cfg.name
    report.to_csv(stem.with_suffix(".csv"))
    report.panel_csv(stem.with_suffix(".panel.csv"))
    report.summary_json(stem.with_suffix(".summary.json"), name=cfg.name, alpha=cfg.alpha)

    print(f"{'cell':>4} {'method':>24} {'coverage':>9} {'length':>8} {'test MSE':>9} {'FCR':>6} {'unbnd':>5}")
    for s in report.summary():
        print(
            f"{s['cell']:>4} {s['method']:>24} {s['coverage']:9.3f} {s['avg_ci_length']:8.3f} "
            f"{s['test_mse']:9.3f} {s['fcr']:6.3f} {s['n_unbounded']:5d}"
        )
    print(f"wrote {stem}.csv, .panel.csv, .summary.json", file=sys.stderr)
