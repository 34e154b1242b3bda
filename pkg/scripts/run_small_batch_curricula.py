#!/usr/bin/env python3
"""Compare the small-batch curricula head to head at batch size 10.

Trains batch size 10 under the setup-penalty ramp (curriculum b) and
under the batch-size anneal that starts from 20 (curriculum c), a few
seeds each, then prints the last task reached, the steps used, and the
best-of-20 plan quality.  Useful when deciding which route to a small
batch size suits a new instance.

Usage: python3 scripts/run_small_batch_curricula.py [--seeds 3]
"""

import argparse

import torch

from batchsched.experiment import SweepConfig, desk_study_config, run_cell
from batchsched.instance import desk_params, generate


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--seeds", type=int, default=3)
    parser.add_argument("--max-steps", type=int, default=6_000_000)
    args = parser.parse_args()
    torch.set_num_threads(1)

    instance = generate(desk_params(0))
    base = desk_study_config()
    for name in ("b", "c"):
        cfg = SweepConfig(
            batch_sizes=(10,),
            seeds=tuple(range(args.seeds)),
            curriculum=name,
            ppo=base.ppo,
            max_env_steps=args.max_steps,
            stall_episodes=base.stall_episodes,
        )
        for seed in cfg.seeds:
            res = run_cell(instance, 10, seed, cfg)
            if not res.ok:
                print(f"curriculum {name} seed {seed}: ERROR")
                print(res.error)
                continue
            rec, plan = res.record, res.plan
            print(f"curriculum {name} seed {seed}: "
                  f"task {rec.task_reached}, {rec.steps_used} steps, "
                  f"{rec.stop_cause}; best plan idle {plan.idle_total:.0f} "
                  f"setup {plan.setup_total:.0f}")


if __name__ == "__main__":
    main()
