"""Staged training tasks and the idle-time transition rule.

A curriculum is an ordered list of tasks, each fixing the action mask
mode, the setup-penalty fraction, and the batch size.  Training moves to
the next task once the trailing-window mean of per-episode idle time
drops below the transition threshold; the final task instead finishes
the run against a stricter threshold.  The window is cleared on every
advance so performance carried over from an easier task can never
trigger the next transition by itself.

Built-ins:

* ``curriculum_a(b)``: mask easing then setup penalty, constant batch size.
* ``curriculum_b()``: setup penalty ramped in 20% steps, all at b=10.
* ``curriculum_c()``: trained at b=20, then batch size stepped down to 10.
* ``alpha_ramp(b)``: the ramp from curriculum b at any batch size.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

from batchsched.env import MASK_MODES

TRANSITION_THRESHOLD = 100.0
FINAL_THRESHOLD = 15.0
WINDOW = 100

STAY = "stay"
ADVANCE = "advance"
FINISHED = "finished"


@dataclass(frozen=True)
class TaskSpec:
    mask_mode: str
    alpha_fraction: float
    batch_size: int

    def __post_init__(self):
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")
        if not 0.0 <= self.alpha_fraction <= 1.0:
            raise ValueError(f"alpha_fraction must be in [0, 1], got {self.alpha_fraction}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class CurriculumSpec:
    name: str
    tasks: tuple[TaskSpec, ...]
    transition_threshold: float = TRANSITION_THRESHOLD
    final_threshold: float = FINAL_THRESHOLD
    window: int = WINDOW

    def __post_init__(self):
        if not self.tasks:
            raise ValueError("curriculum needs at least one task")
        if self.transition_threshold <= 0 or self.final_threshold <= 0:
            raise ValueError("thresholds must be > 0")
        if self.final_threshold > self.transition_threshold:
            raise ValueError("final threshold must not exceed the transition threshold")
        if self.window < 1:
            raise ValueError("window must be >= 1")

    def __len__(self) -> int:
        return len(self.tasks)


@dataclass
class CurriculumState:
    spec: CurriculumSpec
    task_index: int = 0
    episodes_in_task: int = 0
    ring: deque = field(default_factory=deque)

    def __post_init__(self):
        if not 0 <= self.task_index < len(self.spec):
            raise ValueError("task_index out of range")
        self.ring = deque(self.ring, maxlen=self.spec.window)

    @property
    def task(self) -> TaskSpec:
        return self.spec.tasks[self.task_index]

    @property
    def on_final_task(self) -> bool:
        return self.task_index == len(self.spec) - 1


@dataclass(frozen=True)
class Decision:
    kind: str                   # stay | advance | finished
    task_index: int             # current task after the decision
    task: TaskSpec | None       # new task when kind == advance
    window_mean: float | None   # trailing mean that drove the decision


def on_episode_end(cstate: CurriculumState, idle_sum: float) -> Decision:
    """Feed one finished episode's idle-time sum; maybe move the curriculum.

    Deadlocked or capped episodes report their idle sums like any other:
    hiding artificially short episodes would mask the drift failure mode
    instead of exposing it.
    """
    if idle_sum < 0:
        raise ValueError(f"idle_sum must be >= 0, got {idle_sum}")
    spec = cstate.spec
    cstate.ring.append(idle_sum)
    cstate.episodes_in_task += 1
    if len(cstate.ring) < spec.window:
        return Decision(STAY, cstate.task_index, None, None)
    mean = sum(cstate.ring) / len(cstate.ring)
    if cstate.on_final_task:
        if mean < spec.final_threshold:
            return Decision(FINISHED, cstate.task_index, None, mean)
        return Decision(STAY, cstate.task_index, None, mean)
    if mean < spec.transition_threshold:
        cstate.task_index += 1
        cstate.episodes_in_task = 0
        cstate.ring.clear()
        return Decision(ADVANCE, cstate.task_index, cstate.task, mean)
    return Decision(STAY, cstate.task_index, None, mean)


def curriculum_a(batch_size: int) -> CurriculumSpec:
    """Base curriculum: open the mask first, then add the setup penalty."""
    return CurriculumSpec(
        name="a",
        tasks=(
            TaskSpec("easy", 0.0, batch_size),
            TaskSpec("normal", 0.0, batch_size),
            TaskSpec("normal", 1.0, batch_size),
        ),
    )


def alpha_ramp(batch_size: int) -> CurriculumSpec:
    """Mask easing, then the setup penalty eased in as 20% increments.

    The gradual onset avoids the sharp return drop that makes policies
    at small batch sizes shorten episodes instead of paying for setups.
    """
    ramp = tuple(TaskSpec("normal", f, batch_size)
                 for f in (0.2, 0.4, 0.6, 0.8, 1.0))
    return CurriculumSpec(
        name=f"ramp{batch_size}",
        tasks=(TaskSpec("easy", 0.0, batch_size),
               TaskSpec("normal", 0.0, batch_size)) + ramp,
    )


def curriculum_b() -> CurriculumSpec:
    """The alpha ramp at batch size 10."""
    return replace(alpha_ramp(10), name="b")


def curriculum_c() -> CurriculumSpec:
    """Learn at batch size 20, then shrink the batches down to 10."""
    shrink = tuple(TaskSpec("normal", 1.0, b) for b in (18, 16, 14, 12, 10))
    return CurriculumSpec(
        name="c",
        tasks=(
            TaskSpec("easy", 0.0, 20),
            TaskSpec("normal", 0.0, 20),
            TaskSpec("normal", 1.0, 20),
        ) + shrink,
    )


def save_curriculum(spec: CurriculumSpec, path: str | Path) -> Path:
    path = Path(path)
    payload = {
        "name": spec.name,
        "transition_threshold": spec.transition_threshold,
        "final_threshold": spec.final_threshold,
        "window": spec.window,
        "tasks": [
            {
                "mask_mode": t.mask_mode,
                "alpha_fraction": t.alpha_fraction,
                "batch_size": t.batch_size,
            }
            for t in spec.tasks
        ],
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def load_curriculum(name_or_path: str, batch_size: int | None = None) -> CurriculumSpec:
    """Resolve a built-in name (``a`` needs ``batch_size``), ``ramp:<b>``,
    or a JSON file."""
    if name_or_path == "a":
        if batch_size is None:
            raise ValueError("curriculum a needs a batch size")
        return curriculum_a(batch_size)
    if name_or_path == "b":
        return curriculum_b()
    if name_or_path == "c":
        return curriculum_c()
    if name_or_path.startswith("ramp:"):
        return alpha_ramp(int(name_or_path.split(":", 1)[1]))
    path = Path(name_or_path)
    if not path.exists():
        raise ValueError(f"unknown curriculum {name_or_path!r} (not a built-in, not a file)")
    data = json.loads(path.read_text(encoding="utf-8"))
    return CurriculumSpec(
        name=str(data.get("name", path.stem)),
        tasks=tuple(
            TaskSpec(t["mask_mode"], float(t["alpha_fraction"]), int(t["batch_size"]))
            for t in data["tasks"]
        ),
        transition_threshold=float(data.get("transition_threshold", TRANSITION_THRESHOLD)),
        final_threshold=float(data.get("final_threshold", FINAL_THRESHOLD)),
        window=int(data.get("window", WINDOW)),
    )
