"""Shared fixtures: tiny instance corpus and exhaustive plan enumeration."""

import math

from batchsched.instance import (
    FasSchedule,
    GeneratorParams,
    InfeasibleParamsError,
    Instance,
    generate,
    validate,
)
from batchsched.simulator import BUSY, Simulator


def make_instance(
    setup=None,
    pas_proc=2.0,
    schedules=(((0, 1, 0), (6.0, 6.0, 6.0)),),
    capacity=4,
    initial=None,
    num_types=None,
    horizon=None,
    day_window=None,
) -> Instance:
    """Small hand-built instance with sane defaults for directed tests."""
    if num_types is None:
        num_types = 1 + max(t for types, _ in schedules for t in types)
    if setup is None:
        setup = tuple(
            tuple(0.0 if i == j else 1.0 for j in range(num_types))
            for i in range(num_types)
        )
    if initial is None:
        initial = (0,) * num_types
    if horizon is None:
        horizon = float(math.ceil(1.05 * max(sum(p) for _, p in schedules)))
    if day_window is None:
        day_window = horizon / 5.0
    inst = Instance(
        num_types=num_types,
        setup_matrix=tuple(tuple(float(x) for x in row) for row in setup),
        pas_proc_time=float(pas_proc),
        fas_list=tuple(
            FasSchedule(types=tuple(t), proc_times=tuple(p)) for t, p in schedules
        ),
        buffer_capacity=capacity,
        initial_buffer=tuple(initial),
        horizon=float(horizon),
        day_window=float(day_window),
    )
    assert validate(inst) == [], validate(inst)
    return inst


def tiny_corpus(min_count: int = 20) -> list[tuple[str, Instance, int]]:
    """At least ``min_count`` tiny cases: <=3 types, <=2 stations, <=12 units.

    Mixes hand-built edge instances (tight buffers, deadlock bait, covered
    demand, single type) with generated ones, at batch sizes 2 and 3.
    """
    cases: list[tuple[str, Instance, int]] = [
        ("single-type", make_instance(schedules=(((0, 0, 0, 0), (5.0,) * 4),),
                                      capacity=3), 2),
        ("two-types-tight-buffer", make_instance(
            schedules=(((0, 1, 0, 1), (6.0, 6.0, 6.0, 6.0)),), capacity=2), 2),
        ("deadlock-bait", make_instance(
            schedules=(((0, 1, 1, 0), (4.0, 4.0, 4.0, 4.0)),), capacity=3,
            pas_proc=1.0), 3),
        ("covered-at-start", make_instance(
            schedules=(((0, 1), (5.0, 5.0)),), capacity=4, initial=(1, 1)), 2),
        ("two-stations-shared-types", make_instance(
            schedules=(((0, 1, 2), (7.0, 7.0, 7.0)), ((2, 0), (9.0, 9.0))),
            capacity=6, pas_proc=1.0), 2),
        ("two-stations-contention", make_instance(
            schedules=(((0, 0, 1), (5.0, 5.0, 5.0)), ((0, 1, 0), (5.0, 5.0, 5.0))),
            capacity=5, initial=(1, 0), pas_proc=1.0), 3),
        ("slow-producer", make_instance(
            schedules=(((0, 1, 0), (4.0, 4.0, 4.0)),), capacity=4, pas_proc=4.0), 2),
        ("aligned-instants", make_instance(
            schedules=(((0, 1, 0, 1), (4.0, 4.0, 4.0, 4.0)), ((1, 0), (8.0, 8.0))),
            capacity=6, pas_proc=2.0), 2),
        ("roomy-buffer", make_instance(
            schedules=(((0, 1, 2, 1, 0, 2), (5.0,) * 6),), capacity=9,
            pas_proc=1.0), 3),
        ("cap-runaway", make_instance(
            schedules=(((1, 0), (5.0, 5.0)),), capacity=40, pas_proc=2.0,
            horizon=30.0), 2),
    ]
    seed = 0
    while len(cases) < min_count:
        params = GeneratorParams(
            seed=seed,
            num_types=2 + seed % 2,
            num_fas=1 + seed % 2,
            demand_per_fas=(4, 6) if seed % 2 else (6, 9),
            buffer_capacity=4 + seed % 4,
            initial_fill_fraction=(seed % 4) / 4.0,
            pas_proc_range=(1, 2),
            fas_proc_range=(6, 9),
            setup_effort_range=(1, 9),
        )
        seed += 1
        try:
            inst = generate(params)
        except InfeasibleParamsError:
            continue
        if inst.total_demand() > 12:
            continue
        cases.append((f"gen-{params.seed}", inst, 2 + params.seed % 2))
    return cases


def all_terminal_plans(instance: Instance, batch_size: int,
                       depth_cap: int | None = None) -> list[tuple[int, ...]]:
    """Every action sequence up to termination (or a depth cap).

    Explores all types at every decision, including useless ones, so the
    blocked and deadlocked branches get exercised too.
    """
    if depth_cap is None:
        depth_cap = math.ceil(instance.total_demand() / batch_size) + 3
    sim = Simulator(instance, batch_size)
    out: list[tuple[int, ...]] = []
    root = sim.initial_state()

    def rec(state, plan):
        if state.terminated or len(plan) >= depth_cap:
            out.append(tuple(plan))
            return
        for a in range(instance.num_types):
            nxt = state.clone()
            sim.step(nxt, a)
            rec(nxt, plan + [a])

    rec(root, [])
    return out


def naive_demand_instants(sim: Simulator, state, t: int) -> list[float]:
    """Projected demand instants of type ``t``, by direct per-entry walk."""
    instants = []
    for i, fas in enumerate(sim.instance.fas_list):
        f = state.fas[i]
        if f.pos >= len(fas):
            continue
        anchor = f.busy_until if f.mode == BUSY else state.clock
        acc = 0.0
        for j in range(f.pos, len(fas)):
            acc += fas.proc_times[j]
            if fas.types[j] == t:
                instants.append(anchor + acc)
    return sorted(instants)
