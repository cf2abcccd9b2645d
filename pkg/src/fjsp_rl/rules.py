"""Priority dispatching rules run through the same environment as the policy."""
from __future__ import annotations

import enum
from fractions import Fraction

import numpy as np

from . import env as E
from .instances import Instance


class Rule(enum.Enum):
    FIFO = "fifo"
    SPT = "spt"
    MOPNR = "mopnr"
    MWKR = "mwkr"
    RANDOM = "random"

    @classmethod
    def parse(cls, value) -> "Rule":
        if isinstance(value, cls):
            return value
        key = str(value).lower()
        if key in ("randomuniform", "random_uniform", "uniform"):
            key = "random"
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown rule {value!r}; choose from {[r.value for r in cls]}") from None


PDR_RULES = (Rule.FIFO, Rule.SPT, Rule.MOPNR, Rule.MWKR)


def _remaining_work(instance: Instance) -> list[Fraction]:
    """Exact suffix sums of mean durations, per op (the op itself included)."""
    out = [Fraction(0)] * instance.num_operations
    for op_id, _, _, op in instance.operations():
        out[op_id] = Fraction(sum(d for _, d in op.alternatives), len(op.alternatives))
    a = instance.arrays
    for s, ln in zip(a.job_start, a.job_len):
        acc = Fraction(0)
        for k in range(s + ln - 1, s - 1, -1):
            acc += out[k]
            out[k] = acc
    return out


_work_cache: dict[str, list[Fraction]] = {}


def remaining_work(instance: Instance) -> list[Fraction]:
    key = instance.fingerprint
    if key not in _work_cache:
        if len(_work_cache) > 256:
            _work_cache.clear()
        _work_cache[key] = _remaining_work(instance)
    return _work_cache[key]


def pdr_select(state: E.SchedulingState, rule, rng: np.random.Generator | None = None) -> E.Action:
    rule = Rule.parse(rule)
    actions = E.feasible_actions(state)
    if not actions:
        raise E.TerminalStateError("no feasible action: episode is finished")
    if rule is Rule.RANDOM:
        if rng is None:
            raise ValueError("the random rule needs an rng")
        return actions[int(rng.integers(len(actions)))]
    a = state.instance.arrays
    mach = state.mach_avail
    if rule is Rule.FIFO:
        key = lambda x: (state.op_avail[x.op], a.job_of[x.op], mach[x.machine], x.machine)
    elif rule is Rule.SPT:
        key = lambda x: (a.durations[x.op, x.machine], a.job_of[x.op], a.index_in_job[x.op], x.machine)
    elif rule is Rule.MOPNR:
        key = lambda x: (-(a.job_len[a.job_of[x.op]] - a.index_in_job[x.op]),
                         mach[x.machine], a.job_of[x.op], x.machine)
    else:
        work = remaining_work(state.instance)
        key = lambda x: (-work[x.op], mach[x.machine], a.job_of[x.op], x.machine)
    return min(actions, key=key)


def pdr_rollout(instance: Instance, rule, rng: np.random.Generator | None = None,
                reward_mode=E.RewardMode.LOWER_BOUND):
    """Run a rule to completion. Returns (makespan, schedule)."""
    state = E.reset(instance, reward_mode)
    while not state.done:
        state, _ = E.step(state, pdr_select(state, rule, rng))
    return E.makespan(state), state.schedule()
