"""Problem instances for the two-stage batch production line.

An instance holds the static data of the scheduling problem: one batch
producer (PAS) feeding a finite central buffer, a set of final assembly
stations (FAS) that each work through a fixed schedule of typed products,
a sequence-dependent setup-effort matrix, and the planning horizon.

Instances are immutable after construction and safe to share between
parallel training runs.  The generator emits whole-second processing
times, which keeps every event time in the simulator exactly
representable and makes replays bit-reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1

# Feasibility margins used by the generator (zero-idle solutions must exist
# by construction: the PAS can outrun the aggregate FAS consumption rate).
PAS_SLACK = 1.1
FAS_HORIZON_SLACK = 1.05


class InstanceFormatError(ValueError):
    """Instance file could not be parsed."""


class InstanceValidationError(ValueError):
    """Instance data violates a structural invariant."""


class InfeasibleParamsError(ValueError):
    """Generator parameters cannot yield a zero-idle-feasible instance."""


@dataclass(frozen=True)
class FasSchedule:
    """Ordered work list of one final assembly station.

    ``types[i]`` is consumed from the buffer when entry ``i`` starts and the
    station is then busy for ``proc_times[i]`` seconds.
    """

    types: tuple[int, ...]
    proc_times: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.types)


@dataclass(frozen=True)
class Instance:
    """Static problem data.

    Units: all times are seconds, setup efforts are a dimensionless cost,
    buffer quantities are unit counts.
    """

    num_types: int
    setup_matrix: tuple[tuple[float, ...], ...]
    pas_proc_time: float
    fas_list: tuple[FasSchedule, ...]
    buffer_capacity: int
    initial_buffer: tuple[int, ...]
    horizon: float
    day_window: float

    def total_demand_by_type(self) -> list[int]:
        counts = [0] * self.num_types
        for fas in self.fas_list:
            for t in fas.types:
                counts[t] += 1
        return counts

    def total_demand(self) -> int:
        return sum(len(f) for f in self.fas_list)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "num_types": self.num_types,
            "setup_matrix": [list(row) for row in self.setup_matrix],
            "pas_proc_time": self.pas_proc_time,
            "fas_list": [
                {"types": list(f.types), "proc_times": list(f.proc_times)}
                for f in self.fas_list
            ],
            "buffer_capacity": self.buffer_capacity,
            "initial_buffer": list(self.initial_buffer),
            "horizon": self.horizon,
            "day_window": self.day_window,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Instance":
        try:
            version = data["schema_version"]
            if version != SCHEMA_VERSION:
                raise InstanceValidationError(
                    f"unsupported schema_version {version!r}, expected {SCHEMA_VERSION}"
                )
            inst = cls(
                num_types=int(data["num_types"]),
                setup_matrix=tuple(
                    tuple(float(x) for x in row) for row in data["setup_matrix"]
                ),
                pas_proc_time=float(data["pas_proc_time"]),
                fas_list=tuple(
                    FasSchedule(
                        types=tuple(int(t) for t in f["types"]),
                        proc_times=tuple(float(p) for p in f["proc_times"]),
                    )
                    for f in data["fas_list"]
                ),
                buffer_capacity=int(data["buffer_capacity"]),
                initial_buffer=tuple(int(x) for x in data["initial_buffer"]),
                horizon=float(data["horizon"]),
                day_window=float(data["day_window"]),
            )
        except InstanceValidationError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise InstanceValidationError(f"bad instance payload: {exc}") from exc
        violations = validate(inst)
        if violations:
            raise InstanceValidationError("; ".join(violations))
        return inst


def validate(instance: Instance) -> list[str]:
    """Return every violated invariant as a human-readable message.

    An empty list means the instance is well formed.  Violations are data,
    not exceptions: callers decide whether to raise.
    """
    v: list[str] = []
    n = instance.num_types
    if n < 1:
        v.append(f"num_types must be >= 1, got {n}")
        return v
    if len(instance.setup_matrix) != n or any(len(r) != n for r in instance.setup_matrix):
        v.append(f"setup_matrix must be {n}x{n}")
    else:
        for i in range(n):
            if instance.setup_matrix[i][i] != 0:
                v.append(
                    f"setup_matrix[{i}][{i}]={instance.setup_matrix[i][i]} "
                    "(diagonal must be 0, continuing a type costs nothing)"
                )
            for j in range(n):
                if instance.setup_matrix[i][j] < 0:
                    v.append(f"setup_matrix[{i}][{j}] is negative")
    if instance.pas_proc_time <= 0:
        v.append(f"pas_proc_time must be > 0, got {instance.pas_proc_time}")
    if instance.buffer_capacity < 1:
        v.append(f"buffer_capacity must be >= 1, got {instance.buffer_capacity}")
    if len(instance.initial_buffer) != n:
        v.append("initial_buffer length must equal num_types")
    else:
        if any(x < 0 for x in instance.initial_buffer):
            v.append("initial_buffer counts must be non-negative")
        total0 = sum(instance.initial_buffer)
        if total0 > instance.buffer_capacity:
            v.append(
                f"initial buffer holds {total0} units but capacity is "
                f"{instance.buffer_capacity} (overfilled)"
            )
    for fi, fas in enumerate(instance.fas_list):
        if len(fas.types) != len(fas.proc_times):
            v.append(f"fas[{fi}] types/proc_times length mismatch")
            continue
        for ei, (t, p) in enumerate(zip(fas.types, fas.proc_times)):
            if not 0 <= t < n:
                v.append(f"fas[{fi}] entry {ei} references unknown type {t}")
            if p <= 0:
                v.append(f"fas[{fi}] entry {ei} has non-positive proc time {p}")
    if instance.horizon <= 0:
        v.append(f"horizon must be > 0, got {instance.horizon}")
    if instance.day_window <= 0:
        v.append(f"day_window must be > 0, got {instance.day_window}")
    return v


@dataclass(frozen=True)
class GeneratorParams:
    """Knobs for the synthetic instance generator.

    ``scale`` presets exist in :func:`desk_params` / :func:`full_params`;
    the defaults here are the desk-scale study configuration.
    ``fas_rate_mode`` selects whether all stations share one processing
    rate ("symmetric") or each draws its own ("asymmetric").
    """

    seed: int
    num_types: int = 8
    num_fas: int = 4
    demand_per_fas: tuple[int, int] = (140, 160)
    type_skew: float = 0.8
    setup_effort_range: tuple[int, int] = (5, 30)
    buffer_capacity: int = 60
    initial_fill_fraction: float = 0.5
    pas_proc_range: tuple[int, int] = (20, 24)
    fas_proc_range: tuple[int, int] = (110, 130)
    fas_rate_mode: str = "asymmetric"
    days_per_horizon: int = 5
    batch_quantum: int = 1

    def check(self) -> None:
        def _range_ok(lo, hi):
            return 0 < lo <= hi

        if self.num_types < 1 or self.num_fas < 1:
            raise InfeasibleParamsError("need at least one type and one FAS")
        if not _range_ok(*self.demand_per_fas):
            raise InfeasibleParamsError(f"bad demand range {self.demand_per_fas}")
        if not _range_ok(*self.setup_effort_range):
            raise InfeasibleParamsError(f"bad setup range {self.setup_effort_range}")
        if not _range_ok(*self.pas_proc_range):
            raise InfeasibleParamsError(f"bad PAS proc range {self.pas_proc_range}")
        if not _range_ok(*self.fas_proc_range):
            raise InfeasibleParamsError(f"bad FAS proc range {self.fas_proc_range}")
        if self.buffer_capacity < 1:
            raise InfeasibleParamsError("buffer_capacity must be >= 1")
        if not 0.0 <= self.initial_fill_fraction <= 1.0:
            raise InfeasibleParamsError("initial_fill_fraction must be in [0, 1]")
        if self.fas_rate_mode not in ("symmetric", "asymmetric"):
            raise InfeasibleParamsError(f"unknown fas_rate_mode {self.fas_rate_mode!r}")
        if self.days_per_horizon < 1:
            raise InfeasibleParamsError("days_per_horizon must be >= 1")
        if self.batch_quantum < 1:
            raise InfeasibleParamsError("batch_quantum must be >= 1")


def desk_params(seed: int) -> GeneratorParams:
    """Desk-scale study preset: ~600 products, runs on a laptop."""
    return GeneratorParams(seed=seed, demand_per_fas=(180, 200), type_skew=0.5,
                           buffer_capacity=160, initial_fill_fraction=0.8,
                           batch_quantum=40)


def full_params(seed: int) -> GeneratorParams:
    """Week-scale preset: ~15000 products, one working week of production."""
    return GeneratorParams(seed=seed, demand_per_fas=(3700, 3800),
                           buffer_capacity=300, batch_quantum=100)


def _last_index(seq: list[int], value: int) -> int:
    return len(seq) - 1 - seq[::-1].index(value)


def _interleave_fix(order: list[int], rng: np.random.Generator) -> list[int]:
    # A schedule that is one contiguous run per type admits a trivial
    # produce-each-type-once solution; break such blocks if they occur.
    distinct = len(set(order))
    if distinct < 2:
        return order
    runs = 1 + sum(1 for a, b in zip(order, order[1:]) if a != b)
    while runs <= distinct:
        i, j = rng.choice(len(order), size=2, replace=False)
        order[i], order[j] = order[j], order[i]
        runs = 1 + sum(1 for a, b in zip(order, order[1:]) if a != b)
    return order


def generate(params: GeneratorParams) -> Instance:
    """Generate a validated instance, deterministically from ``params.seed``.

    Raises :class:`InfeasibleParamsError` when the drawn processing times
    cannot admit a zero-idle solution (PAS slower than the stations it
    feeds, or total volume exceeding the horizon).
    """
    params.check()
    rng = np.random.default_rng(params.seed)
    n = params.num_types

    # Per-FAS demand volume and skewed type mix.
    demands = rng.integers(params.demand_per_fas[0], params.demand_per_fas[1] + 1,
                           size=params.num_fas)
    weights = (np.arange(n, dtype=float) + 1.0) ** (-params.type_skew)
    weights = rng.permutation(weights)
    weights /= weights.sum()
    counts = np.stack([rng.multinomial(d, weights) for d in demands])

    # Every type must be demanded somewhere; move one unit if not.
    totals = counts.sum(axis=0)
    for t in range(n):
        if totals[t] == 0:
            donor = int(np.argmax(totals))
            fi = int(np.argmax(counts[:, donor]))
            counts[fi, donor] -= 1
            counts[fi, t] += 1
            totals = counts.sum(axis=0)

    # FAS processing rates.
    lo, hi = params.fas_proc_range
    if params.fas_rate_mode == "symmetric":
        shared = int(rng.integers(lo, hi + 1))
        fas_times = [shared] * params.num_fas
    else:
        fas_times = [int(x) for x in rng.integers(lo, hi + 1, size=params.num_fas)]

    orders: list[list[int]] = []
    for fi in range(params.num_fas):
        order: list[int] = []
        for t in range(n):
            order.extend([t] * int(counts[fi, t]))
        order = [int(x) for x in rng.permutation(order)]
        order = _interleave_fix(order, rng)
        orders.append(order)

    # Initial buffer: stock the earliest demands across all stations, in
    # consumption order, so a fresh episode starts with the same
    # production lead time the steady state enjoys.  Seeding by overall
    # demand share instead leaves the first minutes uncovered for
    # small-share types and makes idle-free operation unreachable from
    # the start state.  Units are only stocked against demands that
    # exist; stranded units would permanently eat capacity.
    target = int(params.buffer_capacity * params.initial_fill_fraction)
    initial = [0] * n
    if target > 0:
        events = sorted(
            (j * fas_times[fi], fi, j)
            for fi, order in enumerate(orders) for j in range(len(order))
        )
        for _, fi, j in events[:target]:
            initial[orders[fi][j]] += 1

    # Demand alignment: whatever is not covered by the initial buffer is
    # produced in full batches, so each type's residual demand must be a
    # multiple of every batch size under study (their lcm is the
    # quantum).  Otherwise the last batch of each type strands its
    # remainder in the buffer, and with several types those remainders
    # alone can exceed the buffer and make completion impossible at the
    # larger batch sizes.  Surplus entries are trimmed from the schedule
    # tails, far from the seeded region.
    totals = [sum(o.count(t) for o in orders) for t in range(n)]
    if params.batch_quantum > 1:
        for t in range(n):
            if initial[t] == 0 and (totals[t] - initial[t]) % params.batch_quantum:
                donor = max(range(n), key=lambda u: initial[u])
                if initial[donor] > 0:
                    initial[donor] -= 1
                    initial[t] += 1
        for t in range(n):
            surplus = (totals[t] - initial[t]) % params.batch_quantum
            if surplus and totals[t] - surplus == 0:
                raise InfeasibleParamsError(
                    f"type {t} has {totals[t]} units, too few to align to a "
                    f"batch quantum of {params.batch_quantum}"
                )
            while surplus > 0:
                fi = max(
                    range(params.num_fas),
                    key=lambda f: (_last_index(orders[f], t) * fas_times[f]
                                   if t in orders[f] else -1.0),
                )
                orders[fi].pop(_last_index(orders[fi], t))
                surplus -= 1
        totals = [sum(o.count(t) for o in orders) for t in range(n)]

    schedules = [
        FasSchedule(
            types=tuple(order),
            proc_times=tuple(float(fas_times[fi]) for _ in order),
        )
        for fi, order in enumerate(orders)
    ]

    pas_time = int(rng.integers(params.pas_proc_range[0], params.pas_proc_range[1] + 1))

    horizon = float(
        math.ceil(FAS_HORIZON_SLACK * max(len(s) * ft for s, ft in zip(schedules, fas_times)))
    )
    day_window = horizon / params.days_per_horizon

    # Feasibility: the PAS must be able to produce everything not already
    # buffered, and outrun the aggregate consumption rate, with slack.
    grand_total = sum(totals)
    to_produce = grand_total - sum(initial)
    if pas_time * to_produce * PAS_SLACK > horizon:
        raise InfeasibleParamsError(
            f"PAS needs {pas_time * to_produce} s for {to_produce} units but the "
            f"horizon is {horizon:.0f} s (slack {PAS_SLACK})"
        )
    fas_rate = sum(1.0 / ft for ft in fas_times)
    if 1.0 / pas_time < PAS_SLACK * fas_rate:
        raise InfeasibleParamsError(
            f"PAS rate 1/{pas_time} cannot sustain aggregate FAS consumption "
            f"rate {fas_rate:.5f}/s with slack {PAS_SLACK}"
        )

    setup_lo, setup_hi = params.setup_effort_range
    q = rng.integers(setup_lo, setup_hi + 1, size=(n, n))
    np.fill_diagonal(q, 0)

    inst = Instance(
        num_types=n,
        setup_matrix=tuple(tuple(float(x) for x in row) for row in q),
        pas_proc_time=float(pas_time),
        fas_list=tuple(schedules),
        buffer_capacity=params.buffer_capacity,
        initial_buffer=tuple(initial),
        horizon=horizon,
        day_window=day_window,
    )
    violations = validate(inst)
    if violations:
        raise AssertionError(f"generator produced invalid instance: {violations}")
    return inst


def save(instance: Instance, path: str | Path) -> Path:
    """Write the instance as canonical JSON (stable bytes for equal data)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(instance.to_dict(), indent=2, sort_keys=True)
    path.write_text(text + "\n", encoding="utf-8")
    return path


def load(path: str | Path) -> Instance:
    """Load and validate an instance file.

    Raises :class:`InstanceFormatError` for unparseable files (with the
    offending position) and :class:`InstanceValidationError` for parseable
    files whose data breaks an invariant.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InstanceFormatError(f"cannot read {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InstanceFormatError(
            f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(data, dict):
        raise InstanceValidationError(f"{path}: top level must be an object")
    return Instance.from_dict(data)
