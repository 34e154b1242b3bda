"""Batch-size study: train, evaluate, aggregate, and detect drift.

The study grid is (batch size x seed).  Each cell trains a policy
through a curriculum, then distills it into a production plan by
sampling evaluation rollouts and keeping the lexicographically best one:
completing plans beat incomplete ones, then lower idle wins, then lower
setup effort, then the earlier rollout.  Every selected plan is replayed
against the simulator before it is reported; a plan whose replay
disagrees with its rollout would mean the evaluation lied, so that is an
assertion, not a tolerance.

Aggregates follow the usual reporting conventions for this study:
steps-to-criterion statistics cover finished runs only, and setup-effort
and return statistics cover runs whose best plan is a zero-idle solution
(complete with idle exactly 0).
"""

from __future__ import annotations

import csv
import json
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np
import torch

from batchsched.agent import (
    PolicyNet,
    PPOConfig,
    TrainRunRecord,
    policy_forward,
    sample_action,
    save_checkpoint,
    task_env_config,
    task_reward_config,
    train_loop,
)
from batchsched.curriculum import load_curriculum
from batchsched.env import EnvConfig, RewardConfig, SchedulingEnv
from batchsched.instance import Instance
from batchsched.simulator import run_plan

WORKERS_ENV_VAR = "BATCHSCHED_WORKERS"


@dataclass(frozen=True)
class Plan:
    """A fixed production sequence and its replayed outcome."""

    actions: tuple[int, ...]
    batch_size: int
    idle_total: float
    setup_total: float
    complete: bool
    deadlock: bool
    cause: str
    episode_return: float
    rollout_index: int

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def zero_idle(self) -> bool:
        return self.complete and self.idle_total == 0.0

    def to_dict(self) -> dict:
        return {
            "actions": list(self.actions),
            "batch_size": self.batch_size,
            "idle_total": self.idle_total,
            "setup_total": self.setup_total,
            "complete": self.complete,
            "deadlock": self.deadlock,
            "cause": self.cause,
            "episode_return": self.episode_return,
            "rollout_index": self.rollout_index,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Plan":
        data = dict(data)
        data["actions"] = tuple(data["actions"])
        return cls(**data)


def plan_sort_key(plan: Plan) -> tuple:
    """Completing plans first, then lower idle, setup, earlier rollout."""
    return (0 if plan.complete else 1, plan.idle_total, plan.setup_total,
            plan.rollout_index)


def select_best(plans: list[Plan]) -> Plan:
    if not plans:
        raise ValueError("no plans to select from")
    return min(plans, key=plan_sort_key)


def evaluate(net: PolicyNet, instance: Instance, env_cfg: EnvConfig,
             reward_cfg: RewardConfig | None = None, n_rollouts: int = 20,
             seed: int = 0) -> Plan:
    """Sample rollouts and keep the lexicographically best plan.

    Ties go to the earlier rollout.  If every rollout deadlocks the best
    one is still returned, with its deadlock flag set.
    """
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    if reward_cfg is None:
        reward_cfg = RewardConfig.for_instance(instance)
    env = SchedulingEnv(instance, env_cfg, reward_cfg)
    generator = torch.Generator()
    generator.manual_seed(seed)
    plans: list[Plan] = []
    for k in range(n_rollouts):
        obs, mask = env.reset()
        actions: list[int] = []
        ep_return = 0.0
        done = False
        info: dict = {}
        while not done:
            with torch.no_grad():
                masked_logits, _ = policy_forward(
                    net, torch.from_numpy(obs), torch.from_numpy(mask))
                action, _ = sample_action(masked_logits, generator)
            a = int(action)
            obs_next, reward, done, info = env.step(a)
            actions.append(a)
            ep_return += reward
            if not done:
                obs, mask = obs_next, info["mask"]
        plans.append(Plan(
            actions=tuple(actions),
            batch_size=env_cfg.batch_size,
            idle_total=env.episode_idle,
            setup_total=env.episode_setup,
            complete=bool(info["complete"]),
            deadlock=info["cause"] == "deadlock",
            cause=info["cause"],
            episode_return=ep_return,
            rollout_index=k,
        ))
    best = select_best(plans)
    replay = run_plan(instance, best.batch_size, list(best.actions))
    assert replay.idle == best.idle_total, "replay idle mismatch"
    assert replay.setup_effort == best.setup_total, "replay setup mismatch"
    assert replay.cause == best.cause, "replay cause mismatch"
    return best


@dataclass(frozen=True)
class SweepConfig:
    """Grid settings.

    ``curriculum`` and ``max_env_steps`` apply to every batch size unless
    overridden per size through ``curricula`` / ``step_caps`` (pairs of
    (batch_size, value)).  Small batch sizes need the gentler alpha ramp
    and a larger budget, mirroring how the original protocol tripled the
    training allowance below the smallest batch size that trained plain.
    ``stall_episodes`` > 0 enables early abort of hopeless runs.
    """

    batch_sizes: tuple[int, ...]
    seeds: tuple[int, ...]
    curriculum: str = "a"
    ppo: PPOConfig = field(default_factory=PPOConfig)
    max_env_steps: int = 2_000_000
    eval_rollouts: int = 20
    curricula: tuple[tuple[int, str], ...] = ()
    step_caps: tuple[tuple[int, int], ...] = ()
    stall_episodes: int = 0

    def __post_init__(self):
        if not self.batch_sizes or not self.seeds:
            raise ValueError("batch_sizes and seeds must be nonempty")
        if len(set(self.batch_sizes)) != len(self.batch_sizes):
            raise ValueError("duplicate batch sizes")
        if self.max_env_steps < 0 or self.eval_rollouts < 1:
            raise ValueError("bad budget")
        if self.stall_episodes < 0:
            raise ValueError("stall_episodes must be >= 0")
        for b, _ in self.curricula + self.step_caps:
            if b not in self.batch_sizes:
                raise ValueError(f"override for batch size {b} not in grid")
        if any(cap < 0 for _, cap in self.step_caps):
            raise ValueError("step caps must be >= 0")

    def curriculum_for(self, batch_size: int) -> str:
        return dict(self.curricula).get(batch_size, self.curriculum)

    def cap_for(self, batch_size: int) -> int:
        return dict(self.step_caps).get(batch_size, self.max_env_steps)

    def to_dict(self) -> dict:
        d = {
            "batch_sizes": list(self.batch_sizes),
            "seeds": list(self.seeds),
            "curriculum": self.curriculum,
            "max_env_steps": self.max_env_steps,
            "eval_rollouts": self.eval_rollouts,
            "curricula": [list(pair) for pair in self.curricula],
            "step_caps": [list(pair) for pair in self.step_caps],
            "stall_episodes": self.stall_episodes,
            "ppo": {k: (list(v) if isinstance(v, tuple) else v)
                    for k, v in vars(self.ppo).items()},
        }
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SweepConfig":
        ppo_data = dict(data["ppo"])
        ppo_data["hidden_sizes"] = tuple(ppo_data["hidden_sizes"])
        return cls(
            batch_sizes=tuple(data["batch_sizes"]),
            seeds=tuple(data["seeds"]),
            curriculum=data["curriculum"],
            ppo=PPOConfig(**ppo_data),
            max_env_steps=data["max_env_steps"],
            eval_rollouts=data["eval_rollouts"],
            curricula=tuple((int(b), str(name))
                            for b, name in data.get("curricula", [])),
            step_caps=tuple((int(b), int(cap))
                            for b, cap in data.get("step_caps", [])),
            stall_episodes=int(data.get("stall_episodes", 0)),
        )


@dataclass
class RunResult:
    batch_size: int
    seed: int
    record: TrainRunRecord | None = None
    plan: Plan | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "seed": self.seed,
            "record": self.record.to_dict() if self.record else None,
            "plan": self.plan.to_dict() if self.plan else None,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunResult":
        return cls(
            batch_size=data["batch_size"],
            seed=data["seed"],
            record=(TrainRunRecord.from_dict(data["record"])
                    if data.get("record") else None),
            plan=Plan.from_dict(data["plan"]) if data.get("plan") else None,
            error=data.get("error"),
        )


STALL_MARGIN = 10.0


def stalled(record, cstate, min_episodes: int,
            margin: float = STALL_MARGIN) -> bool:
    """True when the current task has clearly stopped converging.

    A run whose trailing-window idle mean still sits an order of
    magnitude above the transition threshold after thousands of episodes
    in the same task is either infeasible at this batch size or locked
    into a deadlock attractor; neither recovers, so the remaining budget
    would be wasted.  The margin is wide enough that a slow but live run
    never trips it: any policy that will eventually advance has long
    since pushed its window mean well below ten times the threshold.
    """
    if cstate.episodes_in_task < min_episodes:
        return False
    ring = cstate.ring
    if len(ring) < cstate.spec.window:
        return False
    return sum(ring) / len(ring) >= margin * cstate.spec.transition_threshold


def desk_study_config() -> SweepConfig:
    """The frozen batch-size study protocol for the desk-scale instance.

    Sizes 20 and 40 train under the base curriculum; sizes below 20 need
    the gradual setup-penalty ramp (the base curriculum's full-strength
    onset tips them into the deadlock attractor) and get a three times
    larger budget, so a slow ramp run is still distinguishable from an
    untrainable size.  Batch size 40 cannot reach a zero-idle steady
    state on this line, so its runs are expected to stall out early.
    """
    return SweepConfig(
        batch_sizes=(5, 10, 20, 40),
        seeds=tuple(range(10)),
        curriculum="a",
        ppo=PPOConfig(lr=1.0e-3, rollout_length=2048, num_envs=8, epochs=6,
                      minibatch_size=256, entropy_coef=0.01,
                      hidden_sizes=(64, 64)),
        max_env_steps=2_000_000,
        eval_rollouts=20,
        curricula=((5, "ramp:5"), (10, "b")),
        step_caps=((5, 6_000_000), (10, 6_000_000)),
        stall_episodes=5000,
    )


def run_cell(instance: Instance, batch_size: int, seed: int,
             cfg: SweepConfig, out_dir: str | Path | None = None) -> RunResult:
    """Train one (batch size, seed) cell and evaluate its best plan."""
    torch.set_num_threads(1)
    try:
        curriculum = load_curriculum(cfg.curriculum_for(batch_size),
                                     batch_size=batch_size)

        def factory():
            task0 = curriculum.tasks[0]
            return SchedulingEnv(instance, task_env_config(task0),
                                 task_reward_config(instance, task0))

        stop_fn = None
        if cfg.stall_episodes > 0:
            stop_fn = partial(stalled, min_episodes=cfg.stall_episodes)
        record, net = train_loop(factory, curriculum, cfg.ppo, seed,
                                 cfg.cap_for(batch_size), stop_fn=stop_fn)
        final_task = curriculum.tasks[-1]
        eval_seed = int(np.random.SeedSequence(
            [seed, batch_size, 0xE7A1]).generate_state(1, dtype=np.uint32)[0])
        plan = evaluate(net, instance,
                        EnvConfig(final_task.batch_size, "normal"),
                        task_reward_config(instance, final_task),
                        n_rollouts=cfg.eval_rollouts, seed=eval_seed)
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(
                out_dir / f"policy_b{batch_size}_s{seed}.pt", net,
                {"instance": instance.to_dict(), "batch_size": batch_size,
                 "seed": seed, "curriculum": cfg.curriculum,
                 "env_cfg": {"batch_size": final_task.batch_size,
                             "mask_mode": "normal"}})
        return RunResult(batch_size, seed, record=record, plan=plan)
    except Exception:
        return RunResult(batch_size, seed, error=traceback.format_exc())


def _run_cell_star(args) -> RunResult:
    return run_cell(*args)


def sweep(instance: Instance, cfg: SweepConfig,
          out_dir: str | Path | None = None) -> "SweepReport":
    """Run the full (batch size x seed) grid.

    Worker count comes from the BATCHSCHED_WORKERS environment variable
    (default 1, sequential).  Results merge in (batch_size, seed) order
    regardless of completion order, so parallel runs aggregate
    identically to sequential ones.
    """
    cells = [(instance, b, s, cfg, out_dir)
             for b in cfg.batch_sizes for s in cfg.seeds]
    workers = int(os.environ.get(WORKERS_ENV_VAR, "1"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell_star, cells))
    else:
        results = [run_cell(*cell) for cell in cells]
    results.sort(key=lambda r: (r.batch_size, r.seed))
    aggregates = [aggregate_batch(b, results) for b in sorted(cfg.batch_sizes)]
    return SweepReport(config=cfg, results=results, aggregates=aggregates)


def _stats(values: list[float]) -> dict:
    if not values:
        return {"min": None, "avg": None, "max": None, "std": None}
    avg = sum(values) / len(values)
    if len(values) >= 2:
        std = math.sqrt(sum((v - avg) ** 2 for v in values) / (len(values) - 1))
    else:
        std = None
    return {"min": min(values), "avg": avg, "max": max(values), "std": std}


@dataclass(frozen=True)
class BatchAggregate:
    """Per batch-size summary row.

    Steps statistics cover finished runs only; setup and return
    statistics cover zero-idle best plans only.  Failed runs count
    toward n_runs but nothing else.
    """

    batch_size: int
    n_runs: int
    n_failed: int
    n_finished: int
    n_zero_idle: int
    steps: dict
    setup: dict
    episode_return: dict

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "n_runs": self.n_runs,
            "n_failed": self.n_failed,
            "n_finished": self.n_finished,
            "n_zero_idle": self.n_zero_idle,
            "steps": dict(self.steps),
            "setup": dict(self.setup),
            "episode_return": dict(self.episode_return),
        }


def aggregate_batch(batch_size: int, results: list[RunResult]) -> BatchAggregate:
    mine = [r for r in results if r.batch_size == batch_size]
    ok = [r for r in mine if r.ok]
    finished = [r for r in ok if r.record.finished]
    zero_idle = [r for r in ok if r.plan.zero_idle]
    return BatchAggregate(
        batch_size=batch_size,
        n_runs=len(mine),
        n_failed=len(mine) - len(ok),
        n_finished=len(finished),
        n_zero_idle=len(zero_idle),
        steps=_stats([float(r.record.steps_used) for r in finished]),
        setup=_stats([r.plan.setup_total for r in zero_idle]),
        episode_return=_stats([r.plan.episode_return for r in zero_idle]),
    )


@dataclass
class SweepReport:
    config: SweepConfig
    results: list[RunResult]
    aggregates: list[BatchAggregate]

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "results": [r.to_dict() for r in self.results],
            "aggregates": [a.to_dict() for a in self.aggregates],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SweepReport":
        config = SweepConfig.from_dict(data["config"])
        results = [RunResult.from_dict(r) for r in data["results"]]
        aggregates = [aggregate_batch(b, results)
                      for b in sorted(config.batch_sizes)]
        return cls(config=config, results=results, aggregates=aggregates)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True)
                        + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "SweepReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def policy_space_log10(num_actions_avg: float, plan_length: int) -> float:
    """log10 of the plan count for a fixed-length decision sequence.

    Working in logs sidesteps the overflow that the raw count hits
    almost immediately.
    """
    if num_actions_avg < 1:
        raise ValueError("num_actions_avg must be >= 1")
    if plan_length < 0:
        raise ValueError("plan_length must be >= 0")
    return plan_length * math.log10(num_actions_avg)


@dataclass(frozen=True)
class DriftReport:
    drifted: bool
    onset_episode: int | None


def drift_detector(record: TrainRunRecord, nominal_length: float,
                   window: int = 100, idle_threshold: float = 100.0,
                   shrink_factor: float = 0.8) -> DriftReport:
    """Flag runs that trade episode length for apparent idle progress.

    A deadlock-seeking policy ends episodes early, so its trailing mean
    episode length collapses below the nominal plan length while the
    idle numbers look excellent.  Drift is reported at the first episode
    after a task transition where the trailing-``window`` mean length
    drops below ``shrink_factor`` times nominal, provided the trailing
    mean idle had already satisfied the transition condition.
    """
    if nominal_length <= 0:
        raise ValueError("nominal_length must be > 0")
    lengths = record.episode_length
    idles = record.episode_idle
    tasks = record.episode_task
    n = len(lengths)
    first_transition = None
    for i in range(1, n):
        if tasks[i] != tasks[i - 1]:
            first_transition = i
            break
    if first_transition is None:
        return DriftReport(False, None)
    idle_ok_seen = False
    for e in range(window - 1, n):
        idle_mean = sum(idles[e - window + 1:e + 1]) / window
        if idle_mean < idle_threshold:
            idle_ok_seen = True
        if e < first_transition:
            continue
        length_mean = sum(lengths[e - window + 1:e + 1]) / window
        if idle_ok_seen and length_mean < shrink_factor * nominal_length:
            return DriftReport(True, e)
    return DriftReport(False, None)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def report(sweep_report: SweepReport, out_dir: str | Path) -> dict[str, Path]:
    """Write the study's CSVs and manifest; output is byte-stable."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    runs_path = out_dir / "runs.csv"
    run_rows = []
    for r in sweep_report.results:
        rec, plan = r.record, r.plan
        run_rows.append([
            r.batch_size, r.seed,
            rec.finished if rec else None,
            rec.stop_cause if rec else None,
            rec.steps_used if rec else None,
            rec.task_reached if rec else None,
            rec.episodes if rec else None,
            plan.idle_total if plan else None,
            plan.setup_total if plan else None,
            plan.episode_return if plan else None,
            plan.complete if plan else None,
            plan.deadlock if plan else None,
            plan.zero_idle if plan else None,
            (r.error or "").splitlines()[-1] if r.error else None,
        ])
    _write_csv(runs_path, [
        "batch_size", "seed", "finished", "stop_cause", "steps_used",
        "task_reached", "episodes", "best_idle", "best_setup", "best_return",
        "complete", "deadlock", "zero_idle", "error"], run_rows)

    agg_path = out_dir / "aggregate.csv"
    agg_rows = []
    for a in sweep_report.aggregates:
        agg_rows.append([
            a.batch_size, a.n_runs, a.n_failed, a.n_finished, a.n_zero_idle,
            a.steps["min"], a.steps["avg"], a.steps["max"],
            a.setup["min"], a.setup["avg"], a.setup["max"], a.setup["std"],
            a.episode_return["min"], a.episode_return["avg"],
            a.episode_return["max"],
        ])
    _write_csv(agg_path, [
        "batch_size", "n_runs", "n_failed", "n_finished", "n_zero_idle",
        "steps_min", "steps_avg", "steps_max",
        "setup_min", "setup_avg", "setup_max", "setup_std",
        "return_min", "return_avg", "return_max"], agg_rows)

    box_steps_path = out_dir / "box_steps.csv"
    steps_rows = [[r.batch_size, r.seed, r.record.steps_used]
                  for r in sweep_report.results
                  if r.ok and r.record.finished]
    _write_csv(box_steps_path, ["batch_size", "seed", "steps"], steps_rows)

    box_setup_path = out_dir / "box_setup.csv"
    setup_rows = [[r.batch_size, r.seed, r.plan.setup_total]
                  for r in sweep_report.results
                  if r.ok and r.plan.zero_idle]
    _write_csv(box_setup_path, ["batch_size", "seed", "setup"], setup_rows)

    manifest_path = out_dir / "manifest.json"
    from batchsched import __version__
    manifest = {
        "version": __version__,
        "config": sweep_report.config.to_dict(),
        "runs": [{"batch_size": r.batch_size, "seed": r.seed, "ok": r.ok}
                 for r in sweep_report.results],
    }
    manifest_path.write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n",
        encoding="utf-8")

    return {"runs": runs_path, "aggregate": agg_path,
            "box_steps": box_steps_path, "box_setup": box_setup_path,
            "manifest": manifest_path}
