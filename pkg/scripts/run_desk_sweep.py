#!/usr/bin/env python3
"""Run the desk-scale batch-size study and write its artifacts.

Trains the full (batch size x seed) grid from the frozen study protocol
on the reference desk instance, evaluates every trained policy into its
best-of-20 plan, and writes results.json plus the CSV report under
artifacts/desk_study (or --out).  Existing artifacts for the same
protocol are reused unless --force is given; the grid takes a few hours
on one core.

Usage: python3 scripts/run_desk_sweep.py [--out DIR] [--force]
"""

import argparse
import statistics
from pathlib import Path

import torch

from batchsched.experiment import (SweepReport, desk_study_config, report,
                                   sweep)
from batchsched.instance import desk_params, generate


def median_steps(rep: SweepReport, batch_size: int) -> float:
    """Median env steps to the training criterion, unfinished runs
    counted at their budget cap."""
    cap = rep.config.cap_for(batch_size)
    vals = [float(r.record.steps_used) if r.ok and r.record.finished else float(cap)
            for r in rep.results if r.batch_size == batch_size]
    return statistics.median(vals)


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="artifacts/desk_study")
    parser.add_argument("--force", action="store_true",
                        help="retrain even if matching artifacts exist")
    args = parser.parse_args()
    torch.set_num_threads(1)

    out_dir = Path(args.out)
    cfg = desk_study_config()
    results_path = out_dir / "results.json"

    rep = None
    if results_path.exists() and not args.force:
        prior = SweepReport.load(results_path)
        if prior.config == cfg:
            print(f"reusing {results_path}")
            rep = prior
    if rep is None:
        instance = generate(desk_params(0))
        rep = sweep(instance, cfg, out_dir=out_dir / "policies")
        rep.save(results_path)
    paths = report(rep, out_dir)

    for agg in rep.aggregates:
        med = median_steps(rep, agg.batch_size)
        setup = agg.setup["avg"]
        setup_txt = f"{setup:7.1f}" if setup is not None else "     --"
        std = agg.setup["std"]
        std_txt = f"{std:6.1f}" if std is not None else "    --"
        print(f"b={agg.batch_size:3d}: finished {agg.n_finished:2d}/{agg.n_runs}"
              f"  zero-idle {agg.n_zero_idle:2d}  median steps {med:9.0f}"
              f"  setup avg {setup_txt}  std {std_txt}")
    print("wrote", ", ".join(str(p) for p in paths.values()))


if __name__ == "__main__":
    main()
