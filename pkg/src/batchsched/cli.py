"""Command line front end.

Subcommands cover the full study workflow: generate an instance, train a
single policy, evaluate a checkpoint into a plan, run the batch-size
sweep, replay a plan, and regenerate report CSVs from stored results.
Every artifact-producing command writes a manifest with the resolved
configuration so a run can be reproduced byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import torch

from batchsched import __version__
from batchsched.agent import (
    PPOConfig,
    load_checkpoint,
    save_checkpoint,
    task_env_config,
    task_reward_config,
    train_loop,
)
from batchsched.curriculum import load_curriculum
from batchsched.env import EnvConfig, SchedulingEnv
from batchsched.instance import (
    Instance,
    desk_params,
    full_params,
    generate,
    load,
    save,
)
from batchsched.experiment import (
    SweepConfig,
    SweepReport,
    evaluate,
    report,
    sweep,
)
from batchsched.simulator import Simulator, run_plan


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _ppo_from_config(config: dict) -> PPOConfig:
    overrides = dict(config.get("ppo", {}))
    if "hidden_sizes" in overrides:
        overrides["hidden_sizes"] = tuple(overrides["hidden_sizes"])
    return PPOConfig(**overrides)


def _write_manifest(out_dir: Path, payload: dict) -> Path:
    payload = {"tool_version": __version__, **payload}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def cmd_gen_instance(args) -> int:
    params = full_params(args.seed) if args.scale == "full" else desk_params(args.seed)
    instance = generate(params)
    path = save(instance, args.out)
    print(f"wrote {path}: {instance.num_types} types, "
          f"{len(instance.fas_list)} stations, "
          f"{instance.total_demand()} units, horizon {instance.horizon:.0f} s")
    return 0


def cmd_train(args) -> int:
    instance = load(args.instance)
    curriculum = load_curriculum(args.curriculum, batch_size=args.batch_size)
    config = _read_config(args.config)
    ppo = _ppo_from_config(config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def factory():
        task0 = curriculum.tasks[0]
        return SchedulingEnv(instance, task_env_config(task0),
                             task_reward_config(instance, task0))

    record, net = train_loop(factory, curriculum, ppo, args.seed,
                             args.max_steps)
    final_task = curriculum.tasks[-1]
    save_checkpoint(out_dir / "checkpoint.pt", net, {
        "instance": instance.to_dict(),
        "seed": args.seed,
        "curriculum": args.curriculum,
        "env_cfg": {"batch_size": final_task.batch_size,
                    "mask_mode": "normal"},
    })
    (out_dir / "record.json").write_text(
        json.dumps(record.to_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    _write_manifest(out_dir, {
        "command": "train",
        "instance": str(args.instance),
        "curriculum": args.curriculum,
        "batch_size": args.batch_size,
        "seed": args.seed,
        "max_steps": args.max_steps,
        "ppo": {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in vars(ppo).items()},
    })
    print(f"trained seed {args.seed}: finished={record.finished} "
          f"steps={record.steps_used} episodes={record.episodes} "
          f"task_reached={record.task_reached}")
    return 0


def cmd_eval(args) -> int:
    net, meta = load_checkpoint(args.checkpoint)
    instance = Instance.from_dict(meta["instance"])
    env_meta = meta.get("env_cfg", {})
    batch_size = args.batch_size or env_meta.get("batch_size")
    if batch_size is None:
        raise ValueError("checkpoint holds no batch size; pass --batch-size")
    env_cfg = EnvConfig(batch_size=int(batch_size),
                        mask_mode=env_meta.get("mask_mode", "normal"))
    plan = evaluate(net, instance, env_cfg, n_rollouts=args.rollouts,
                    seed=args.seed)
    print(f"best plan: idle={plan.idle_total:.0f} s "
          f"setup={plan.setup_total:.0f} complete={plan.complete} "
          f"deadlock={plan.deadlock} length={len(plan)}")
    if args.out:
        Path(args.out).write_text(
            json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8")
        print(f"wrote {args.out}")
    return 0


def cmd_sweep(args) -> int:
    instance = load(args.instance)
    config = _read_config(args.config)
    batch_sizes = tuple(int(v) for v in args.batch_sizes.split(","))
    cfg = SweepConfig(
        batch_sizes=batch_sizes,
        seeds=tuple(range(args.seeds)),
        curriculum=args.curriculum,
        ppo=_ppo_from_config(config),
        max_env_steps=args.max_steps,
        eval_rollouts=args.rollouts,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rep = sweep(instance, cfg, out_dir=out_dir / "policies")
    rep.save(out_dir / "results.json")
    report(rep, out_dir)
    _write_manifest(out_dir, {
        "command": "sweep",
        "instance": str(args.instance),
        "config": cfg.to_dict(),
    })
    for agg in rep.aggregates:
        steps = agg.steps["avg"]
        steps_txt = f"{steps:.0f}" if steps is not None else "--"
        setup = agg.setup["avg"]
        setup_txt = f"{setup:.1f}" if setup is not None else "--"
        print(f"b={agg.batch_size}: finished {agg.n_finished}/{agg.n_runs}, "
              f"zero-idle {agg.n_zero_idle}, steps avg {steps_txt}, "
              f"setup avg {setup_txt}")
    print(f"wrote {out_dir}")
    return 0


def cmd_simulate(args) -> int:
    instance = load(args.instance)
    plan_data = json.loads(Path(args.plan).read_text(encoding="utf-8"))
    actions = [int(a) for a in plan_data["actions"]]
    batch_size = int(plan_data["batch_size"])
    result = run_plan(instance, batch_size, actions)
    print(f"cause={result.cause} idle={result.idle:.0f} s "
          f"setup={result.setup_effort:.0f} complete={result.complete} "
          f"steps={result.steps_executed}")
    if args.trace:
        sim = Simulator(instance, batch_size)
        state = sim.initial_state()
        rows = []
        for i, action in enumerate(actions):
            if state.terminated:
                break
            sim.step(state, action)
            rows.append([i, action, repr(state.clock),
                         state.buffer_total,
                         repr(sim.live_idle(state)),
                         repr(state.setup_effort_total)])
        with open(args.trace, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "action", "clock", "buffer_total",
                             "idle", "setup"])
            writer.writerows(rows)
        print(f"wrote {args.trace}")
    return 0


def cmd_report(args) -> int:
    in_dir = Path(args.in_dir)
    rep = SweepReport.load(in_dir / "results.json")
    out_dir = Path(args.out) if args.out else in_dir
    paths = report(rep, out_dir)
    print(f"wrote {', '.join(str(p) for p in paths.values())}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="batchsched",
        description="batch scheduling study: instances, training, sweeps")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-instance", help="generate a problem instance")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", choices=("desk", "full"), default="desk")
    p.set_defaults(func=cmd_gen_instance)

    p = sub.add_parser("train", help="train one policy through a curriculum")
    p.add_argument("--instance", required=True)
    p.add_argument("--curriculum", default="a")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-steps", type=int, default=2_000_000)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint into a plan")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rollouts", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run the batch-size study grid")
    p.add_argument("--instance", required=True)
    p.add_argument("--curriculum", default="a")
    p.add_argument("--batch-sizes", required=True,
                   help="comma separated, e.g. 10,20,40")
    p.add_argument("--seeds", type=int, default=10,
                   help="number of seeds per batch size")
    p.add_argument("--max-steps", type=int, default=2_000_000)
    p.add_argument("--rollouts", type=int, default=20)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("simulate", help="replay a stored plan")
    p.add_argument("--instance", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--trace", default=None,
                   help="write a per-step CSV trace here")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="regenerate CSVs from stored results")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
