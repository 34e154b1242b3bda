"""Masked-action PPO on the scheduling environment.

The policy is a shared-trunk MLP: both the action logits and the value
estimate read the same tanh features.  Illegal actions are removed by
overwriting their logits with a large finite sentinel before the
softmax, which keeps their probability at exactly zero while leaving
log-probabilities and entropies finite.

Sampling uses the Gumbel-max trick on the masked logits instead of
torch.multinomial: a sentinel logit of -1e8 can never win an argmax
against a legal logit, so illegal actions are structurally unreachable
rather than merely improbable.

``train_loop`` couples the learner to a curriculum: finished episodes
report their idle-time sums, task changes are applied to every worker
environment at its next reset, and the loop stops when the curriculum
signals completion or the step budget runs out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from batchsched.curriculum import (
    ADVANCE,
    FINISHED,
    CurriculumSpec,
    CurriculumState,
    TaskSpec,
    on_episode_end,
)
from batchsched.env import EnvConfig, RewardConfig, SchedulingEnv

MASK_SENTINEL = -1.0e8
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_ratio: float = 0.2
    lr: float = 3.0e-4
    rollout_length: int = 4096
    num_envs: int = 8
    epochs: int = 10
    minibatch_size: int = 512
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    hidden_sizes: tuple[int, ...] = (256, 256)

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must be in [0, 1]")
        if self.clip_ratio <= 0:
            raise ValueError("clip_ratio must be > 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.num_envs < 1 or self.rollout_length < self.num_envs:
            raise ValueError("need rollout_length >= num_envs >= 1")
        if self.epochs < 1 or self.minibatch_size < 1:
            raise ValueError("epochs and minibatch_size must be >= 1")
        if self.entropy_coef < 0 or self.value_coef < 0:
            raise ValueError("loss coefficients must be >= 0")
        if self.max_grad_norm <= 0:
            raise ValueError("max_grad_norm must be > 0")
        if not self.hidden_sizes or any(h < 1 for h in self.hidden_sizes):
            raise ValueError("hidden_sizes must be a nonempty tuple of positive ints")


class PolicyNet(nn.Module):
    """Shared trunk, separate linear heads for logits and value."""

    def __init__(self, obs_dim: int, num_actions: int,
                 hidden_sizes: Sequence[int] = (256, 256)):
        super().__init__()
        layers: list[nn.Module] = []
        last = obs_dim
        for h in hidden_sizes:
            layers.append(nn.Linear(last, h))
            layers.append(nn.Tanh())
            last = h
        self.trunk = nn.Sequential(*layers)
        self.policy_head = nn.Linear(last, num_actions)
        self.value_head = nn.Linear(last, 1)
        self.obs_dim = obs_dim
        self.num_actions = num_actions
        self.hidden_sizes = tuple(hidden_sizes)

    def forward(self, obs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        z = self.trunk(obs)
        return self.policy_head(z), self.value_head(z).squeeze(-1)


def policy_forward(net: PolicyNet, obs: torch.Tensor,
                   mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Compute masked logits and value estimates.

    ``mask`` is boolean with the same leading shape as ``obs``; rows with
    no legal action are a caller error, not a samplable state.
    """
    if not bool(mask.any(dim=-1).all()):
        raise ValueError("mask with no legal action")
    logits, value = net(obs)
    masked = torch.where(mask, logits, torch.full_like(logits, MASK_SENTINEL))
    return masked, value


def sample_action(masked_logits: torch.Tensor,
                  generator: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Draw from the masked categorical; returns (action, log_prob).

    Gumbel-max keeps sentinel logits out of reach: -1e8 plus any Gumbel
    draw still loses to every legal logit.
    """
    u = torch.rand(masked_logits.shape, generator=generator)
    gumbel = -torch.log(-torch.log(u.clamp_min(1e-20)))
    action = torch.argmax(masked_logits + gumbel, dim=-1)
    log_prob = torch.log_softmax(masked_logits, dim=-1).gather(
        -1, action.unsqueeze(-1)).squeeze(-1)
    return action, log_prob


def argmax_action(masked_logits: torch.Tensor) -> int:
    """Greedy action for a single state; ties break to the smallest id."""
    flat = masked_logits.reshape(-1)
    return int((flat == flat.max()).nonzero()[0].item())


def distribution_entropy(masked_logits: torch.Tensor) -> torch.Tensor:
    """Entropy of the masked categorical; exact 0 for a single legal action."""
    log_probs = torch.log_softmax(masked_logits, dim=-1)
    probs = log_probs.exp()
    return -(probs * log_probs).sum(dim=-1)


def compute_gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
                bootstrap_value: np.ndarray | float, gamma: float,
                lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation over one or more rollout lanes.

    Arrays are time-major, shape (T,) or (T, N).  ``dones[t]`` marks the
    step that ended its episode; the bootstrap value covers lanes whose
    last step was not terminal.  Advantages are returned raw; any
    normalization is the optimizer's business.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if rewards.shape != values.shape or rewards.shape != dones.shape:
        raise ValueError("rewards, values and dones must share a shape")
    T = rewards.shape[0]
    advantages = np.zeros_like(rewards)
    next_value = np.broadcast_to(
        np.asarray(bootstrap_value, dtype=np.float64), rewards.shape[1:]).copy()
    next_adv = np.zeros(rewards.shape[1:], dtype=np.float64)
    for t in range(T - 1, -1, -1):
        alive = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * alive - values[t]
        next_adv = delta + gamma * lam * alive * next_adv
        advantages[t] = next_adv
        next_value = values[t]
    return advantages, advantages + values


@dataclass
class Trajectory:
    """Flattened rollout batch ready for PPO epochs."""

    obs: torch.Tensor          # (N, obs_dim) float32
    masks: torch.Tensor        # (N, num_actions) bool
    actions: torch.Tensor      # (N,) int64
    log_probs: torch.Tensor    # (N,) float32, behavior policy
    advantages: torch.Tensor   # (N,) float32, raw
    returns: torch.Tensor      # (N,) float32

    def __len__(self) -> int:
        return self.obs.shape[0]


@dataclass
class UpdateStats:
    policy_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    clip_fraction: float = 0.0
    approx_kl: float = 0.0
    aborted: bool = False
    message: str = ""


def ppo_loss(net: PolicyNet, obs: torch.Tensor, masks: torch.Tensor,
             actions: torch.Tensor, old_log_probs: torch.Tensor,
             advantages: torch.Tensor, returns: torch.Tensor,
             cfg: PPOConfig) -> tuple[torch.Tensor, dict]:
    """Clipped surrogate + value + entropy loss for one minibatch."""
    masked_logits, values = policy_forward(net, obs, masks)
    log_probs_all = torch.log_softmax(masked_logits, dim=-1)
    new_log_probs = log_probs_all.gather(-1, actions.unsqueeze(-1)).squeeze(-1)
    ratio = torch.exp(new_log_probs - old_log_probs)
    unclipped = ratio * advantages
    clipped = torch.clamp(ratio, 1.0 - cfg.clip_ratio,
                          1.0 + cfg.clip_ratio) * advantages
    policy_loss = -torch.min(unclipped, clipped).mean()
    value_loss = ((values - returns) ** 2).mean()
    entropy = distribution_entropy(masked_logits).mean()
    total = (policy_loss + cfg.value_coef * value_loss
             - cfg.entropy_coef * entropy)
    with torch.no_grad():
        clip_fraction = ((ratio - 1.0).abs() > cfg.clip_ratio).float().mean()
        approx_kl = (old_log_probs - new_log_probs).mean()
    stats = {
        "policy_loss": float(policy_loss.item()),
        "value_loss": float(value_loss.item()),
        "entropy": float(entropy.item()),
        "clip_fraction": float(clip_fraction.item()),
        "approx_kl": float(approx_kl.item()),
    }
    return total, stats


def ppo_update(net: PolicyNet, optimizer: torch.optim.Optimizer,
               batch: Trajectory, cfg: PPOConfig,
               generator: torch.Generator) -> UpdateStats:
    """Run the epoch/minibatch schedule over one rollout batch.

    Advantages are normalized once over the whole batch.  A non-finite
    loss aborts the update and restores the parameters and optimizer
    state captured at entry.
    """
    param_snapshot = {k: v.detach().clone() for k, v in net.state_dict().items()}
    opt_snapshot = {
        "state": {
            k: {sk: (sv.detach().clone() if torch.is_tensor(sv) else sv)
                for sk, sv in s.items()}
            for k, s in optimizer.state_dict()["state"].items()
        },
        "param_groups": [dict(g) for g in optimizer.state_dict()["param_groups"]],
    }

    adv = batch.advantages
    adv = (adv - adv.mean()) / (adv.std(unbiased=False) + 1e-8)

    n = len(batch)
    totals = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0,
              "clip_fraction": 0.0, "approx_kl": 0.0}
    minibatches = 0
    for _ in range(cfg.epochs):
        perm = torch.randperm(n, generator=generator)
        for start in range(0, n, cfg.minibatch_size):
            idx = perm[start:start + cfg.minibatch_size]
            loss, stats = ppo_loss(
                net, batch.obs[idx], batch.masks[idx], batch.actions[idx],
                batch.log_probs[idx], adv[idx], batch.returns[idx], cfg)
            if not torch.isfinite(loss):
                net.load_state_dict(param_snapshot)
                optimizer.load_state_dict(opt_snapshot)
                return UpdateStats(
                    aborted=True,
                    message=f"non-finite loss {loss.item()!r}; update rolled back")
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(net.parameters(), cfg.max_grad_norm)
            optimizer.step()
            for k in totals:
                totals[k] += stats[k]
            minibatches += 1
    scale = 1.0 / max(1, minibatches)
    return UpdateStats(**{k: v * scale for k, v in totals.items()})


def task_env_config(task: TaskSpec) -> EnvConfig:
    return EnvConfig(batch_size=task.batch_size, mask_mode=task.mask_mode)


def task_reward_config(instance, task: TaskSpec) -> RewardConfig:
    return RewardConfig.for_instance(instance).with_alpha_fraction(task.alpha_fraction)


@dataclass
class TrainRunRecord:
    """One training run's provenance and per-episode curves."""

    seed: int
    curriculum_name: str
    batch_size: int
    finished: bool = False
    steps_used: int = 0
    task_reached: int = 0
    stop_cause: str = "budget"
    episode_return: list = field(default_factory=list)
    episode_idle: list = field(default_factory=list)
    episode_length: list = field(default_factory=list)
    episode_setup: list = field(default_factory=list)
    episode_task: list = field(default_factory=list)

    @property
    def episodes(self) -> int:
        return len(self.episode_idle)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "curriculum_name": self.curriculum_name,
            "batch_size": self.batch_size,
            "finished": self.finished,
            "steps_used": self.steps_used,
            "task_reached": self.task_reached,
            "stop_cause": self.stop_cause,
            "episode_return": list(self.episode_return),
            "episode_idle": list(self.episode_idle),
            "episode_length": list(self.episode_length),
            "episode_setup": list(self.episode_setup),
            "episode_task": list(self.episode_task),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainRunRecord":
        return cls(**data)


def train_loop(env_factory: Callable[[], SchedulingEnv],
               curriculum: CurriculumSpec, ppo_cfg: PPOConfig, seed: int,
               max_env_steps: int,
               callbacks: Sequence[Callable[[str, dict], None]] = (),
               stop_fn: Callable[[TrainRunRecord, CurriculumState], bool] | None = None,
               ) -> tuple[TrainRunRecord, PolicyNet]:
    """Train a fresh policy through the curriculum.

    Episodes report idle sums to the curriculum as they finish; only
    episodes played under the current task feed its window, so a task
    switch cannot be triggered by leftovers from an easier task.  Task
    reconfiguration lands at each environment's next reset, never
    mid-episode.  Stops on curriculum completion, after ``max_env_steps``
    environment steps, or when ``stop_fn`` (checked after each finished
    episode) reports the run as hopeless; ``record.stop_cause`` says
    which one it was.
    """
    if max_env_steps < 0:
        raise ValueError("max_env_steps must be >= 0")
    ss = np.random.SeedSequence([seed, 0x9a7])
    init_seed, sample_seed = [int(s) for s in ss.generate_state(2, dtype=np.uint32)]
    torch.manual_seed(init_seed)

    envs = [env_factory() for _ in range(ppo_cfg.num_envs)]
    instance = envs[0].instance
    num_actions = instance.num_types
    obs_dim = 4 * num_actions + 1
    net = PolicyNet(obs_dim, num_actions, ppo_cfg.hidden_sizes)
    optimizer = torch.optim.Adam(net.parameters(), lr=ppo_cfg.lr)
    generator = torch.Generator()
    generator.manual_seed(sample_seed)

    cstate = CurriculumState(curriculum)
    record = TrainRunRecord(seed=seed, curriculum_name=curriculum.name,
                            batch_size=curriculum.tasks[-1].batch_size)

    for env in envs:
        env.set_task(task_env_config(cstate.task),
                     task_reward_config(instance, cstate.task))
    obs = np.zeros((ppo_cfg.num_envs, obs_dim), dtype=np.float32)
    masks = np.zeros((ppo_cfg.num_envs, num_actions), dtype=bool)
    lane_task = [0] * ppo_cfg.num_envs
    lane_return = [0.0] * ppo_cfg.num_envs
    for i, env in enumerate(envs):
        obs[i], masks[i] = env.reset()
        lane_task[i] = cstate.task_index

    steps_per_lane = max(1, ppo_cfg.rollout_length // ppo_cfg.num_envs)
    done_flag = False

    def apply_task():
        for env in envs:
            env.set_task(task_env_config(cstate.task),
                         task_reward_config(instance, cstate.task))

    def finish_episode(i: int, info: dict) -> None:
        nonlocal done_flag
        record.episode_return.append(lane_return[i])
        record.episode_idle.append(info["episode_idle"])
        record.episode_length.append(envs[i].episode_steps)
        record.episode_setup.append(info["episode_setup"])
        record.episode_task.append(lane_task[i])
        lane_return[i] = 0.0
        for cb in callbacks:
            cb("episode", {"idle": info["episode_idle"],
                           "task": lane_task[i],
                           "episodes": record.episodes})
        if done_flag or lane_task[i] != cstate.task_index:
            return
        decision = on_episode_end(cstate, info["episode_idle"])
        if decision.kind == ADVANCE:
            record.task_reached = cstate.task_index
            apply_task()
        elif decision.kind == FINISHED:
            record.finished = True
            record.stop_cause = "finished"
            done_flag = True
        if not done_flag and stop_fn is not None and stop_fn(record, cstate):
            record.stop_cause = "stalled"
            done_flag = True

    while not done_flag and record.steps_used < max_env_steps:
        buf_obs = np.zeros((steps_per_lane, ppo_cfg.num_envs, obs_dim),
                           dtype=np.float32)
        buf_masks = np.zeros((steps_per_lane, ppo_cfg.num_envs, num_actions),
                             dtype=bool)
        buf_actions = np.zeros((steps_per_lane, ppo_cfg.num_envs), dtype=np.int64)
        buf_log_probs = np.zeros((steps_per_lane, ppo_cfg.num_envs),
                                 dtype=np.float32)
        buf_rewards = np.zeros((steps_per_lane, ppo_cfg.num_envs),
                               dtype=np.float32)
        buf_values = np.zeros((steps_per_lane, ppo_cfg.num_envs),
                              dtype=np.float32)
        buf_dones = np.zeros((steps_per_lane, ppo_cfg.num_envs), dtype=bool)
        collected = 0
        for t in range(steps_per_lane):
            if done_flag or record.steps_used >= max_env_steps:
                break
            obs_t = torch.from_numpy(obs)
            mask_t = torch.from_numpy(masks)
            with torch.no_grad():
                masked_logits, values = policy_forward(net, obs_t, mask_t)
                actions, log_probs = sample_action(masked_logits, generator)
            buf_obs[t] = obs
            buf_masks[t] = masks
            buf_actions[t] = actions.numpy()
            buf_log_probs[t] = log_probs.numpy()
            buf_values[t] = values.numpy()
            for i, env in enumerate(envs):
                o, r, done, info = env.step(int(actions[i]))
                lane_return[i] += r
                buf_rewards[t, i] = r
                buf_dones[t, i] = done
                if done:
                    finish_episode(i, info)
                    o, m = env.reset()
                    obs[i], masks[i] = o, m
                    lane_task[i] = cstate.task_index
                else:
                    obs[i], masks[i] = o, info["mask"]
            record.steps_used += ppo_cfg.num_envs
            collected = t + 1
        if collected == 0:
            break
        with torch.no_grad():
            _, tail_values = policy_forward(net, torch.from_numpy(obs),
                                            torch.from_numpy(masks))
        adv, rets = compute_gae(buf_rewards[:collected],
                                buf_values[:collected],
                                buf_dones[:collected],
                                tail_values.numpy(),
                                ppo_cfg.gamma, ppo_cfg.lam)
        batch = Trajectory(
            obs=torch.from_numpy(buf_obs[:collected].reshape(-1, obs_dim)),
            masks=torch.from_numpy(
                buf_masks[:collected].reshape(-1, num_actions)),
            actions=torch.from_numpy(buf_actions[:collected].reshape(-1)),
            log_probs=torch.from_numpy(buf_log_probs[:collected].reshape(-1)),
            advantages=torch.from_numpy(adv.reshape(-1).astype(np.float32)),
            returns=torch.from_numpy(rets.reshape(-1).astype(np.float32)),
        )
        stats = ppo_update(net, optimizer, batch, ppo_cfg, generator)
        for cb in callbacks:
            cb("update", {"stats": stats, "steps_used": record.steps_used})

    record.task_reached = max(record.task_reached, cstate.task_index)
    return record, net


def save_checkpoint(path: str | Path, net: PolicyNet, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "version": CHECKPOINT_VERSION,
        "obs_dim": net.obs_dim,
        "num_actions": net.num_actions,
        "hidden_sizes": tuple(net.hidden_sizes),
        "model_state": net.state_dict(),
        "meta": dict(meta or {}),
    }, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[PolicyNet, dict]:
    payload = torch.load(Path(path), weights_only=True)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    net = PolicyNet(payload["obs_dim"], payload["num_actions"],
                    payload["hidden_sizes"])
    net.load_state_dict(payload["model_state"])
    net.eval()
    return net, payload["meta"]
