"""Schedule-construction MDP.

A state records what has been scheduled so far; an action assigns one ready
operation to one eligible machine. The transition is the usual semi-active
rule ``finish = max(predecessor finish, machine available) + duration``.

All times are exact integers. States are treated as values: ``step`` returns
a fresh state and never mutates its input.
"""
from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .instances import Instance


class InfeasibleActionError(ValueError):
    pass


class TerminalStateError(RuntimeError):
    pass


class RewardMode(enum.Enum):
    LOWER_BOUND = "lower_bound"
    DELTA_MAKESPAN = "delta_makespan"
    ESTIMATED_MEAN = "estimated_mean"

    @classmethod
    def parse(cls, value) -> "RewardMode":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("-", "_")
        aliases = {"lb": "lower_bound", "lowerbound": "lower_bound", "delta": "delta_makespan",
                   "deltamakespan": "delta_makespan", "mean": "estimated_mean",
                   "estimatedmean": "estimated_mean"}
        return cls(aliases.get(key, key))


class Action(NamedTuple):
    op: int
    machine: int


@dataclass(frozen=True)
class ScheduledOp:
    op_id: int
    job: int
    idx: int
    machine: int
    start: int
    finish: int


@dataclass(frozen=True, eq=False)
class SchedulingState:
    instance: Instance
    t: int
    machine_of: np.ndarray   # [n] assigned machine, -1 if unscheduled
    start: np.ndarray        # [n]
    finish: np.ndarray       # [n]
    op_avail: np.ndarray     # [n] earliest start (LB-propagated for non-ready ops)
    mach_avail: np.ndarray   # [m]
    lb: np.ndarray           # [n] lower-bound finish times
    est: np.ndarray          # [n] mean-duration estimate of finish times
    frontier: np.ndarray     # [J] index of the next unscheduled op in each job
    reward_mode: RewardMode = RewardMode.LOWER_BOUND
    time_scale: float | None = field(default=None)

    @property
    def n_ops(self) -> int:
        return self.machine_of.shape[0]

    @property
    def scheduled(self) -> np.ndarray:
        return self.machine_of >= 0

    @property
    def done(self) -> bool:
        return self.t == self.n_ops

    @property
    def ready(self) -> np.ndarray:
        """Unscheduled ops whose job predecessor (if any) is scheduled."""
        a = self.instance.arrays
        return (~self.scheduled) & (a.index_in_job == self.frontier[a.job_of])

    @property
    def o2o_mask(self) -> np.ndarray:
        """``[i, k]`` true when unscheduled ``k`` is a later op of unscheduled ``i``'s job."""
        live = ~self.scheduled
        return self.instance.arrays.successors & live[:, None] & live[None, :]

    @property
    def o2m_feasible(self) -> np.ndarray:
        return self.instance.arrays.eligible & (~self.scheduled)[:, None]

    @property
    def feasible_mask(self) -> np.ndarray:
        return self.instance.arrays.eligible & self.ready[:, None]

    @property
    def lower_bound(self) -> int:
        return int(self.lb.max())

    @property
    def current_makespan(self) -> int:
        return int(self.mach_avail.max())

    def schedule(self) -> list[ScheduledOp]:
        a = self.instance.arrays
        ops = [ScheduledOp(int(o), int(a.job_of[o]), int(a.index_in_job[o]), int(self.machine_of[o]),
                           int(self.start[o]), int(self.finish[o]))
               for o in np.flatnonzero(self.scheduled)]
        ops.sort(key=lambda s: (s.start, s.machine, s.op_id))
        return ops


def _propagate(values: np.ndarray, start: int, stop: int, base, increments: np.ndarray):
    """Chain ``values[k] = values[k-1] + increments[k]`` over ``k in [start, stop)``."""
    if start < stop:
        values[start:stop] = base + np.cumsum(increments[start:stop])


def reset(instance: Instance, reward_mode=RewardMode.LOWER_BOUND,
          time_scale: float | None = None) -> SchedulingState:
    a = instance.arrays
    n, m = instance.num_operations, instance.num_machines
    lb = np.empty(n, dtype=np.int64)
    est = np.empty(n, dtype=np.float64)
    for s, ln in zip(a.job_start, a.job_len):
        _propagate(lb, s, s + ln, 0, a.min_dur)
        _propagate(est, s, s + ln, 0.0, a.mean_dur)
    return SchedulingState(
        instance=instance, t=0,
        machine_of=np.full(n, -1, dtype=np.int64),
        start=np.zeros(n, dtype=np.int64),
        finish=np.zeros(n, dtype=np.int64),
        op_avail=lb - a.min_dur,
        mach_avail=np.zeros(m, dtype=np.int64),
        lb=lb, est=est,
        frontier=np.zeros(instance.num_jobs, dtype=np.int64),
        reward_mode=RewardMode.parse(reward_mode),
        time_scale=time_scale,
    )


def feasible_actions(state: SchedulingState) -> list[Action]:
    """All ready (op, machine) pairs, op-major then machine order. Empty when done."""
    ops, machines = np.nonzero(state.feasible_mask)
    return [Action(int(o), int(m)) for o, m in zip(ops, machines)]


def is_feasible(state: SchedulingState, action) -> bool:
    op, m = int(action[0]), int(action[1])
    if not (0 <= op < state.n_ops and 0 <= m < state.mach_avail.shape[0]):
        return False
    return bool(state.feasible_mask[op, m])


def step(state: SchedulingState, action) -> tuple[SchedulingState, float]:
    op, m = int(action[0]), int(action[1])
    if state.done:
        raise TerminalStateError("episode already finished")
    if not is_feasible(state, (op, m)):
        raise InfeasibleActionError(f"action (op={op}, machine={m}) is not feasible at step {state.t}")
    a = state.instance.arrays
    job = int(a.job_of[op])
    s0 = int(a.job_start[job])
    end = s0 + int(a.job_len[job])

    start = max(int(state.op_avail[op]), int(state.mach_avail[m]))
    finish = start + int(a.durations[op, m])

    machine_of = state.machine_of.copy(); machine_of[op] = m
    st = state.start.copy(); st[op] = start
    ft = state.finish.copy(); ft[op] = finish
    mach_avail = state.mach_avail.copy(); mach_avail[m] = finish
    lb = state.lb.copy(); lb[op] = finish
    est = state.est.copy(); est[op] = finish
    _propagate(lb, op + 1, end, finish, a.min_dur)
    _propagate(est, op + 1, end, float(finish), a.mean_dur)
    op_avail = state.op_avail.copy()
    if op + 1 < end:
        op_avail[op + 1:end] = lb[op + 1:end] - a.min_dur[op + 1:end]
    frontier = state.frontier.copy(); frontier[job] += 1

    new = replace(state, t=state.t + 1, machine_of=machine_of, start=st, finish=ft,
                  op_avail=op_avail, mach_avail=mach_avail, lb=lb, est=est, frontier=frontier)
    mode = state.reward_mode
    if mode is RewardMode.LOWER_BOUND:
        reward = -float(lb.max() - state.lb.max())
    elif mode is RewardMode.DELTA_MAKESPAN:
        reward = -float(mach_avail.max() - state.mach_avail.max())
    else:
        reward = -float(est.max() - state.est.max())
    return new, reward


def makespan(state: SchedulingState) -> int:
    if not state.done:
        raise TerminalStateError(f"makespan requested at step {state.t} of {state.n_ops}")
    return int(state.finish.max())


def rollout(instance: Instance, actions, reward_mode=RewardMode.LOWER_BOUND):
    """Replay an action sequence; returns (final state, rewards)."""
    state = reset(instance, reward_mode)
    rewards = []
    for act in actions:
        state, r = step(state, act)
        rewards.append(r)
    return state, rewards


# --------------------------------------------------------------------------- features

@dataclass(frozen=True, eq=False)
class StateFeatures:
    """Network input for one state. Times are relative to the current global
    minimum available time and divided by ``time_scale``."""

    op_features: np.ndarray     # [n, 2] (relative available time, min duration)
    mach_features: np.ndarray   # [m, 1] relative available time
    edge_features: np.ndarray   # [n, m] duration where o2m is live, else 0
    o2o_mask: np.ndarray        # [n, n]
    o2m_mask: np.ndarray        # [n, m]
    feasible_mask: np.ndarray   # [n, m]
    op_valid: np.ndarray        # [n] unscheduled
    positions: np.ndarray       # [n] index within job
    job_of: np.ndarray          # [n]
    time_scale: float
    instance_key: str = ""

    @property
    def num_ops(self) -> int:
        return self.op_features.shape[0]

    @property
    def num_machines(self) -> int:
        return self.mach_features.shape[0]


def default_time_scale(instance: Instance) -> float:
    return float(instance.max_duration)


def extract_features(state: SchedulingState, time_scale: float | None = None) -> StateFeatures:
    inst = state.instance
    a = inst.arrays
    scale = time_scale or state.time_scale or default_time_scale(inst)
    live = ~state.scheduled
    base = int(state.mach_avail.min())
    if live.any():
        base = min(base, int(state.op_avail[live].min()))
    o2m = a.eligible & live[:, None]
    # eligibility never shrinks for unscheduled ops, so this equals the static minimum
    big = np.iinfo(np.int64).max
    min_dur = np.where(o2m, a.durations, big).min(axis=1, initial=big)
    min_dur = np.where(live, min_dur, 0)
    op_feat = np.zeros((state.n_ops, 2))
    op_feat[:, 0] = np.where(live, state.op_avail - base, 0) / scale
    op_feat[:, 1] = min_dur / scale
    mach_feat = ((state.mach_avail - base) / scale)[:, None]
    edge = np.where(o2m, a.durations, 0) / scale
    return StateFeatures(
        op_features=op_feat,
        mach_features=mach_feat,
        edge_features=edge,
        o2o_mask=state.o2o_mask,
        o2m_mask=o2m,
        feasible_mask=state.feasible_mask,
        op_valid=live,
        positions=a.index_in_job.copy(),
        job_of=a.job_of.copy(),
        time_scale=float(scale),
        instance_key=inst.fingerprint,
    )


# --------------------------------------------------------------------------- Markov key

def canonical_hash(state: SchedulingState, relative: bool = False) -> str:
    """Digest of the remaining subproblem.

    Covers machine available times and per-job frontiers (next index and the
    finish of the last scheduled op), all shifted so the earliest machine is
    at 0, plus the remaining operations with their eligible machines and
    durations (which fix the remaining precedence and eligibility edges).

    By default the shift itself is hashed too, so equal digests also mean
    equal absolute times and hence equal final makespans under any
    deterministic policy. ``relative=True`` drops it: equal digests then mean
    the same subproblem up to a constant time offset.
    """
    inst = state.instance
    a = inst.arrays
    base = int(state.mach_avail.min())
    machines = tuple(int(x) - base for x in state.mach_avail)
    jobs = []
    for j, job in enumerate(inst.jobs):
        k = int(state.frontier[j])
        last = None if k == 0 else int(state.finish[a.job_start[j] + k - 1]) - base
        remaining = tuple(op.alternatives for op in job.operations[k:])
        jobs.append((k, last, remaining))
    offset = None if relative else base
    payload = repr((inst.num_machines, machines, tuple(jobs), offset)).encode()
    return hashlib.sha256(payload).hexdigest()


# --------------------------------------------------------------------------- export

SCHEDULE_CSV_HEADER = ("op_id", "job", "idx", "machine", "start", "finish")


def schedule_to_csv(schedule: list[ScheduledOp]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCHEDULE_CSV_HEADER)
    for s in sorted(schedule, key=lambda s: s.op_id):
        w.writerow((s.op_id, s.job, s.idx, s.machine, s.start, s.finish))
    return buf.getvalue()


def schedule_from_csv(text: str) -> list[ScheduledOp]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and tuple(rows[0].keys()) != SCHEDULE_CSV_HEADER:
        raise ValueError(f"schedule CSV header must be {','.join(SCHEDULE_CSV_HEADER)}")
    return [ScheduledOp(*(int(r[k]) for k in SCHEDULE_CSV_HEADER)) for r in rows]


def gantt_json(schedule: list[ScheduledOp], num_machines: int | None = None) -> dict:
    if num_machines is None:
        num_machines = 1 + max((s.machine for s in schedule), default=-1)
    machines = [[] for _ in range(num_machines)]
    for s in sorted(schedule, key=lambda s: (s.machine, s.start)):
        machines[s.machine].append({"op": s.op_id, "job": s.job, "idx": s.idx,
                                    "start": s.start, "finish": s.finish,
                                    "label": f"O{s.job + 1},{s.idx + 1}"})
    return {"format": "gantt", "version": 1,
            "makespan": max((s.finish for s in schedule), default=0),
            "machines": [{"machine": k, "bars": bars} for k, bars in enumerate(machines)]}


def gantt_to_json_text(gantt: dict) -> str:
    return json.dumps(gantt, indent=1) + "\n"
