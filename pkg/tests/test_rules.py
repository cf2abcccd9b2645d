from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fjsp_rl import env as E
from fjsp_rl import instances as I
from fjsp_rl import rules as R
from fjsp_rl.oracle import brute_force_oracle, validate_schedule

from conftest import tiny_instances


def test_spt_example():
    # o1 on m1: 7, o1 on m2: 3, o2 on m1: 5  (0-indexed ops/machines below)
    inst = I.Instance.from_lists([[[(0, 7), (1, 3)]], [[(0, 5)]]])
    assert R.pdr_select(E.reset(inst), "spt") == E.Action(0, 1)


def test_mopnr_prefers_job_with_more_remaining_ops():
    inst = I.Instance.from_lists([[[(0, 9)]], [[(0, 1)], [(0, 1)], [(0, 1)]]])
    act = R.pdr_select(E.reset(inst), R.Rule.MOPNR)
    assert inst.arrays.job_of[act.op] == 1


def test_mwkr_hand_example():
    # job A mean-work 4.5 + 7.5 = 12 ; job B 9
    inst = I.Instance.from_lists([
        [[(0, 3), (1, 6)], [(0, 7), (1, 8)]],
        [[(0, 9)]],
    ])
    assert R.remaining_work(inst)[0] == Fraction(12)
    s = E.reset(inst)
    s, _ = E.step(s, (2, 0))           # machine 0 now busy until 9
    act = R.pdr_select(s, R.Rule.MWKR)
    assert act == E.Action(0, 1)      # job A's ready op on the earliest-available machine


def test_fifo_picks_earliest_available_op():
    inst = I.Instance.from_lists([[[(0, 5)], [(1, 1)]], [[(1, 2)], [(1, 1)]]])
    s = E.reset(inst)
    s, _ = E.step(s, (0, 0))          # job0's next op available at 5
    assert R.pdr_select(s, "fifo") == E.Action(2, 1)


def test_rule_parse():
    assert R.Rule.parse("MWKR") is R.Rule.MWKR
    assert R.Rule.parse("RandomUniform") is R.Rule.RANDOM
    with pytest.raises(ValueError):
        R.Rule.parse("lifo")


def test_terminal_state_raises():
    inst = I.Instance.from_lists([[[(0, 1)]]])
    s, _ = E.step(E.reset(inst), (0, 0))
    with pytest.raises(E.TerminalStateError):
        R.pdr_select(s, "spt")


def test_random_needs_rng_and_is_reproducible():
    inst = I.generate(I.GeneratorConfig("SD2", 6, 4, rng_seed=1))
    with pytest.raises(ValueError):
        R.pdr_select(E.reset(inst), "random")
    a = R.pdr_rollout(inst, "random", np.random.default_rng(5))
    b = R.pdr_rollout(inst, "random", np.random.default_rng(5))
    assert a[0] == b[0] and a[1] == b[1]


def test_single_job_spt_matches_oracle():
    # one job: every machine is idle when the next op is ready, so shortest choice is optimal
    inst = I.Instance.from_lists([[[(0, 4), (1, 2)], [(0, 3)], [(1, 5), (0, 6)]]])
    opt = brute_force_oracle(inst)
    assert opt == 2 + 3 + 5
    assert R.pdr_rollout(inst, "spt")[0] == opt
    for rule in R.PDR_RULES:
        assert R.pdr_rollout(inst, rule)[0] >= opt


@settings(max_examples=150)
@given(tiny_instances(), st.sampled_from(list(R.Rule)), st.integers(0, 2**32 - 1))
def test_rules_always_feasible_and_bounded(inst, rule, seed):
    rng = np.random.default_rng(seed)
    s = E.reset(inst)
    steps = 0
    while not s.done:
        act = R.pdr_select(s, rule, rng)
        assert E.is_feasible(s, act)
        if rule is R.Rule.SPT:
            feas = E.feasible_actions(s)
            d = inst.arrays.durations
            assert d[act.op, act.machine] == min(d[a.op, a.machine] for a in feas)
        s, _ = E.step(s, act)
        steps += 1
    assert steps == inst.num_operations
    span = E.makespan(s)
    validate_schedule(inst, s.schedule(), span)
    assert I.lower_bound_static(inst)[0] <= brute_force_oracle(inst) <= span


def test_remaining_work_includes_ready_op():
    inst = I.Instance.from_lists([[[(0, 1), (1, 2)], [(0, 4)]]])
    assert R.remaining_work(inst) == [Fraction(11, 2), Fraction(4)]
