"""Discrete-event simulator for the PAS -> buffer -> FAS line.

One simulator step corresponds to one producer decision: the PAS builds a
full batch of the chosen type (``batch_size * pas_proc_time`` seconds),
then inserts all units into the central buffer at once.  If the buffer
cannot take the whole batch the PAS blocks until consumption frees enough
room.  Final assembly stations pull one unit per schedule entry the moment
the entry starts and accrue idle time while the required type is missing.

Event ordering at equal instants is fixed so replays are exact: FAS
completions first (by station index), then the batch insertion, then
waking waiting stations (by station index).  All generator-produced times
are whole seconds, so every event instant is exactly representable and
two runs of the same plan agree bit for bit.

Episodes end when every schedule entry has started (``complete``), when
nothing can ever progress again (``deadlock``: PAS blocked on a full
buffer with no station running and no waiting station serviceable), or at
a hard safety cap of twice the planning horizon (``safety_cap``).
"""

from __future__ import annotations

import math
from bisect import bisect_left, bisect_right
from dataclasses import dataclass

import numpy as np

from batchsched.instance import Instance

SAFETY_CAP_FACTOR = 2.0

BUSY = 0
WAITING = 1
DONE = 2

CAUSE_COMPLETE = "complete"
CAUSE_DEADLOCK = "deadlock"
CAUSE_SAFETY_CAP = "safety_cap"


@dataclass(slots=True)
class FasState:
    """Mutable per-station bookkeeping.

    ``pos`` indexes the next schedule entry that has not started yet; while
    ``mode == BUSY`` the station is processing entry ``pos - 1`` until
    ``busy_until``.
    """

    mode: int
    pos: int
    busy_until: float
    idle_since: float
    idle_accumulated: float


@dataclass(slots=True)
class SimState:
    clock: float
    last_type: int | None
    buffer: list[int]
    buffer_total: int
    fas: list[FasState]
    gross_remaining: list[int]
    pending_total: int
    setup_effort_total: float
    units_inserted: int
    units_consumed: int
    terminated: bool
    cause: str | None
    steps: int

    def clone(self) -> "SimState":
        return SimState(
            clock=self.clock,
            last_type=self.last_type,
            buffer=list(self.buffer),
            buffer_total=self.buffer_total,
            fas=[FasState(f.mode, f.pos, f.busy_until, f.idle_since,
                          f.idle_accumulated) for f in self.fas],
            gross_remaining=list(self.gross_remaining),
            pending_total=self.pending_total,
            setup_effort_total=self.setup_effort_total,
            units_inserted=self.units_inserted,
            units_consumed=self.units_consumed,
            terminated=self.terminated,
            cause=self.cause,
            steps=self.steps,
        )


@dataclass(frozen=True)
class TypeProfile:
    """Per-type stock outlook at one decision instant.

    ``net_day[t]``   demand within one day window minus buffer stock,
    ``net_all[t]``   all remaining demand minus buffer stock,
    ``range_s[t]``   seconds until stock of ``t`` runs out (``inf`` when the
                     buffer already covers every pending entry).
    """

    net_day: tuple[float, ...]
    net_all: tuple[float, ...]
    range_s: tuple[float, ...]


class Simulator:
    """Replayable dynamics for one instance at a fixed batch size."""

    def __init__(self, instance: Instance, batch_size: int):
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        if batch_size > instance.buffer_capacity:
            raise ValueError(
                f"batch_size {batch_size} exceeds buffer capacity "
                f"{instance.buffer_capacity}; every insertion would block forever"
            )
        self.instance = instance
        self.batch_size = batch_size
        self.safety_cap = SAFETY_CAP_FACTOR * instance.horizon
        self.total_by_type = instance.total_demand_by_type()
        n = instance.num_types

        # Static per-station prefix sums: entry j of station f finishes
        # processing prefix[f][j + 1] seconds after the station starts its
        # pending block, which is all the projection queries need.
        self._prefix: list[np.ndarray] = []
        self._type_pos: list[list[np.ndarray]] = []
        self._type_prefix: list[list[np.ndarray]] = []
        for fas in instance.fas_list:
            p = np.zeros(len(fas) + 1)
            np.cumsum(np.asarray(fas.proc_times), out=p[1:])
            self._prefix.append(p)
            by_type_pos = []
            by_type_prefix = []
            types = np.asarray(fas.types)
            for t in range(n):
                js = np.flatnonzero(types == t)
                by_type_pos.append(js)
                by_type_prefix.append(p[js + 1])
            self._type_pos.append(by_type_pos)
            self._type_prefix.append(by_type_prefix)

    # -- lifecycle -----------------------------------------------------

    def initial_state(self) -> SimState:
        inst = self.instance
        state = SimState(
            clock=0.0,
            last_type=None,
            buffer=list(inst.initial_buffer),
            buffer_total=sum(inst.initial_buffer),
            fas=[FasState(WAITING, 0, 0.0, 0.0, 0.0) for _ in inst.fas_list],
            gross_remaining=list(self.total_by_type),
            pending_total=inst.total_demand(),
            setup_effort_total=0.0,
            units_inserted=0,
            units_consumed=0,
            terminated=False,
            cause=None,
            steps=0,
        )
        for f in state.fas:
            f.mode = WAITING  # every station asks for its first unit at t=0
        self._wake_waiters(state)
        self._maybe_finish(state)
        return state

    def step(self, state: SimState, action: int) -> None:
        """Produce and insert one batch of ``action``; advance to insertion.

        Mutates ``state``.  The state is settled afterwards: either ready
        for the next decision or terminated.
        """
        if state.terminated:
            raise RuntimeError("step() on a terminated episode")
        if not 0 <= action < self.instance.num_types:
            raise ValueError(f"action {action} out of range")
        if state.last_type is not None and state.last_type != action:
            state.setup_effort_total += self.instance.setup_matrix[state.last_type][action]
        state.last_type = action
        state.steps += 1

        done_at = state.clock + self.batch_size * self.instance.pas_proc_time
        if done_at > self.safety_cap:
            self._advance_completions(state, self.safety_cap)
            if not state.terminated:
                state.clock = self.safety_cap
                self._terminate(state, CAUSE_SAFETY_CAP)
            return
        self._advance_completions(state, done_at)
        if state.terminated:
            return
        state.clock = done_at

        # Blocked insertion: drain one consumption at a time until the
        # whole batch fits, the line deadlocks, or demand runs out.
        while state.buffer_total + self.batch_size > self.instance.buffer_capacity:
            nxt = self._next_completion(state)
            if nxt is None:
                self._terminate(state, CAUSE_DEADLOCK)
                return
            t_next, _ = nxt
            if t_next > self.safety_cap:
                state.clock = self.safety_cap
                self._terminate(state, CAUSE_SAFETY_CAP)
                return
            self._advance_completions(state, t_next)
            if state.terminated:
                return

        state.buffer[action] += self.batch_size
        state.buffer_total += self.batch_size
        state.units_inserted += self.batch_size
        self._wake_waiters(state)
        self._maybe_finish(state)

    # -- event machinery -----------------------------------------------

    def _next_completion(self, state: SimState) -> tuple[float, int] | None:
        best = None
        for i, f in enumerate(state.fas):
            if f.mode == BUSY and (best is None or f.busy_until < best[0]):
                best = (f.busy_until, i)
        return best

    def _advance_completions(self, state: SimState, target: float) -> None:
        # Process every completion due at or before target, earliest first,
        # ties by station index; each completed station immediately tries
        # to start its next entry.
        while True:
            nxt = self._next_completion(state)
            if nxt is None or nxt[0] > target:
                break
            t_ev, i = nxt
            state.clock = t_ev
            f = state.fas[i]
            if f.pos >= len(self.instance.fas_list[i]):
                f.mode = DONE
                continue
            self._try_start(state, i)
            if state.pending_total == 0:
                self._terminate(state, CAUSE_COMPLETE)
                return

    def _try_start(self, state: SimState, i: int) -> None:
        fas = self.instance.fas_list[i]
        f = state.fas[i]
        t = fas.types[f.pos]
        if state.buffer[t] > 0:
            if f.mode == WAITING:
                f.idle_accumulated += state.clock - f.idle_since
            state.buffer[t] -= 1
            state.buffer_total -= 1
            state.gross_remaining[t] -= 1
            state.pending_total -= 1
            state.units_consumed += 1
            f.busy_until = state.clock + fas.proc_times[f.pos]
            f.pos += 1
            f.mode = BUSY
        elif f.mode != WAITING:
            f.mode = WAITING
            f.idle_since = state.clock

    def _wake_waiters(self, state: SimState) -> None:
        for i, f in enumerate(state.fas):
            if f.mode == WAITING:
                self._try_start(state, i)

    def _maybe_finish(self, state: SimState) -> None:
        if state.terminated:
            return
        if state.pending_total == 0:
            self._terminate(state, CAUSE_COMPLETE)
            return
        # Once stock covers every remaining entry the producer is out of
        # the picture; the rest of the episode is a fixed event cascade
        # with no further idle, so play it out and close the episode.
        if all(state.gross_remaining[t] <= state.buffer[t]
               for t in range(self.instance.num_types)):
            while state.pending_total > 0:
                nxt = self._next_completion(state)
                assert nxt is not None, "covered demand must drain via completions"
                self._advance_completions(state, nxt[0])
            if not state.terminated:
                self._terminate(state, CAUSE_COMPLETE)

    def _terminate(self, state: SimState, cause: str) -> None:
        for f in state.fas:
            if f.mode == WAITING:
                f.idle_accumulated += state.clock - f.idle_since
                f.idle_since = state.clock
        state.terminated = True
        state.cause = cause

    # -- queries ---------------------------------------------------------

    def live_idle(self, state: SimState) -> float:
        """Total idle seconds accrued up to ``state.clock``."""
        total = 0.0
        for f in state.fas:
            total += f.idle_accumulated
            if f.mode == WAITING and not state.terminated:
                total += state.clock - f.idle_since
        return total

    def all_demand_met(self, state: SimState) -> bool:
        return state.cause == CAUSE_COMPLETE

    def _station_anchor(self, state: SimState, i: int) -> float | None:
        f = state.fas[i]
        if f.pos >= len(self.instance.fas_list[i]):
            return None
        return f.busy_until if f.mode == BUSY else state.clock

    def demand_within(self, state: SimState, t: int, window: float) -> int:
        """Pending entries of type ``t`` whose projected demand instant
        falls within ``window`` seconds of the current clock.

        Entry ``j`` of a station is projected to demand at the instant the
        station would finish it with uninterrupted supply: the station
        anchor (its current completion time, or the clock while it waits)
        plus every pending processing time through entry ``j`` itself.
        """
        deadline = state.clock + window
        count = 0
        for i in range(len(state.fas)):
            anchor = self._station_anchor(state, i)
            if anchor is None:
                continue
            pos = state.fas[i].pos
            js = self._type_pos[i][t]
            lo = bisect_left(js, pos)
            if lo == len(js):
                continue
            bound = deadline - anchor + self._prefix[i][pos]
            hi = bisect_right(self._type_prefix[i][t], bound, lo=lo)
            count += hi - lo
        return count

    def range_of(self, state: SimState, t: int) -> float:
        """Seconds until buffered stock of type ``t`` runs out.

        With ``k`` units in the buffer the first ``k`` projected demands
        are covered; the range is the instant of demand ``k + 1`` relative
        to the clock, or ``inf`` when no uncovered demand remains.
        """
        k = state.buffer[t]
        heads: list[tuple[float, int, int]] = []
        for i in range(len(state.fas)):
            anchor = self._station_anchor(state, i)
            if anchor is None:
                continue
            pos = state.fas[i].pos
            js = self._type_pos[i][t]
            lo = bisect_left(js, pos)
            if lo < len(js):
                offset = anchor - self._prefix[i][pos]
                heads.append((offset + self._type_prefix[i][t][lo], i, lo))
        for _ in range(k):
            if not heads:
                return math.inf
            idx = min(range(len(heads)), key=lambda h: heads[h][0])
            instant, i, lo = heads[idx]
            lo += 1
            js = self._type_pos[i][t]
            if lo == len(js):
                heads.pop(idx)
            else:
                anchor = self._station_anchor(state, i)
                offset = anchor - self._prefix[i][state.fas[i].pos]
                heads[idx] = (offset + self._type_prefix[i][t][lo], i, lo)
        if not heads:
            return math.inf
        return min(h[0] for h in heads) - state.clock

    def type_profile(self, state: SimState, day_window: float | None = None) -> TypeProfile:
        """Stock outlook for every type in one pass (see :class:`TypeProfile`)."""
        if day_window is None:
            day_window = self.instance.day_window
        n = self.instance.num_types
        net_day = []
        net_all = []
        range_s = []
        for t in range(n):
            net_day.append(float(self.demand_within(state, t, day_window) - state.buffer[t]))
            net_all.append(float(state.gross_remaining[t] - state.buffer[t]))
            range_s.append(self.range_of(state, t))
        return TypeProfile(tuple(net_day), tuple(net_all), tuple(range_s))


@dataclass(frozen=True)
class PlanResult:
    """Outcome of replaying a fixed production plan."""

    idle: float
    setup_effort: float
    cause: str
    complete: bool
    steps_executed: int
    units_inserted: int
    units_consumed: int
    final_clock: float


def run_plan(instance: Instance, batch_size: int, plan: list[int] | tuple[int, ...]) -> PlanResult:
    """Replay ``plan`` (a sequence of type choices) against the dynamics.

    Stops at episode termination or at the end of the plan, whichever
    comes first.
    """
    sim = Simulator(instance, batch_size)
    state = sim.initial_state()
    executed = 0
    for action in plan:
        if state.terminated:
            break
        sim.step(state, action)
        executed += 1
    cause = state.cause if state.cause is not None else "plan_exhausted"
    return PlanResult(
        idle=sim.live_idle(state),
        setup_effort=state.setup_effort_total,
        cause=cause,
        complete=state.cause == CAUSE_COMPLETE,
        steps_executed=executed,
        units_inserted=state.units_inserted,
        units_consumed=state.units_consumed,
        final_clock=state.clock,
    )
