"""Acceptance criteria 1-10, each at its stated tolerance.

Test names carry the criterion number; the terminal summary prints one
PASS/FAIL line per criterion. Criterion 8 trains six desk-scale models and
takes about an hour on one core (marked ``slow``).

Published benchmark files are not bundled except for Taillard. Criteria 7
and 10 look for them under ``$FJSP_BENCH_DIR`` (default ``benchmarks/`` at
the repository root) in ``brandimarte/`` and ``hurink/{edata,rdata,vdata}/``.
"""
import os
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from fjsp_rl import autodiff as A
from fjsp_rl import env as E
from fjsp_rl import evaluation as EV
from fjsp_rl import instances as I
from fjsp_rl import policy as P
from fjsp_rl import rules as R
from fjsp_rl import training as T
from fjsp_rl.desk import desk_config, run_desk_check
from fjsp_rl.oracle import count_sequences, evaluate_sequence, validate_schedule

import test_autodiff
import test_policy
import test_training

BENCH_DIR = Path(os.environ.get("FJSP_BENCH_DIR", Path(__file__).resolve().parent.parent / "benchmarks"))
HURINK_SETS = ("edata", "rdata", "vdata")
HURINK_COUNT = 66


def _benchmark_files(sub: str) -> list[Path]:
    d = BENCH_DIR / sub
    if not d.is_dir():
        return []
    return sorted(p for p in d.iterdir() if p.is_file() and not p.name.startswith("."))


def _require(files: list[Path], expected: int, what: str) -> None:
    if len(files) < expected:
        pytest.fail(f"{what}: found {len(files)} of {expected} instance files under {BENCH_DIR}; the "
                    f"published set is not bundled (set FJSP_BENCH_DIR to a copy)")


def _reference_table() -> dict[str, int]:
    refs = I.reference_upper_bounds()
    extra = BENCH_DIR / "reference_ub.json"
    if extra.is_file():
        refs.update(EV.load_reference_table(str(extra)))
    return refs


# --------------------------------------------------------------------------- 1

def _oracle_instance(rng, cap=5000):
    """Random FJSP instance with 1-9 operations (uniform) and at most ``cap`` action sequences."""
    while True:
        n = int(rng.integers(1, 10))
        m = int(rng.integers(1, 4))
        cuts = []
        if n > 1:
            cuts = sorted(rng.choice(np.arange(1, n), size=int(rng.integers(0, min(3, n))), replace=False))
        lens = np.diff([0, *cuts, n])
        jobs = [[[(int(k), int(rng.integers(1, 10)))
                  for k in sorted(rng.choice(m, size=int(rng.integers(1, m + 1)), replace=False))]
                 for _ in range(int(ln))] for ln in lens]
        inst = I.Instance.from_lists(jobs, m)
        if count_sequences(inst) <= cap:
            return inst


def test_criterion_01_transition_oracle_equivalence(acceptance_note):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    checked = 0
    for _ in range(500):
        inst = _oracle_instance(rng)
        leaves = []

        def walk(state, seq):
            if state.done:
                leaves.append(1)
                assert E.makespan(state) == evaluate_sequence(inst, seq)[0], (inst.to_lists(), seq)
                return
            for act in E.feasible_actions(state):
                walk(E.step(state, act)[0], seq + [(act.op, act.machine)])

        walk(E.reset(inst), [])
        assert len(leaves) == count_sequences(inst)
        checked += len(leaves)
    elapsed = time.perf_counter() - t0
    acceptance_note(f"c1: {checked} complete action sequences over 500 instances in {elapsed:.1f}s")
    assert elapsed < 120


# --------------------------------------------------------------------------- 2

def test_criterion_02_reward_telescoping():
    rng = np.random.default_rng(7)
    for k in range(1000):
        if k % 2:
            inst = I.generate(I.GeneratorConfig("SD2", int(rng.integers(1, 9)), int(rng.integers(1, 6)),
                                                rng_seed=int(rng.integers(2**31))))
        else:
            inst = test_policy.random_instance(rng, max_jobs=4, max_ops=4, max_machines=4, max_total=16,
                                               max_dur=99)
        s = E.reset(inst, E.RewardMode.LOWER_BOUND)
        lb0 = I.lower_bound_static(inst)[0]
        assert s.lower_bound == lb0
        total = 0.0
        while not s.done:
            feas = E.feasible_actions(s)
            s, r = E.step(s, feas[int(rng.integers(len(feas)))])
            total += r
        assert total == lb0 - E.makespan(s)


# --------------------------------------------------------------------------- 3

def _hash_pairs(count, rng):
    """Pairs of distinct partial schedules of the same instance with equal canonical hashes."""
    pairs = []
    while len(pairs) < count:
        inst = test_policy.random_instance(rng, max_jobs=3, max_ops=3, max_machines=3, max_total=7, max_dur=5)
        seen, stack, groups = set(), [E.reset(inst)], {}
        while stack:
            s = stack.pop()
            key = (s.machine_of.tobytes(), s.start.tobytes())
            if key in seen:
                continue
            seen.add(key)
            if not s.done:
                groups.setdefault(E.canonical_hash(s), []).append(s)
                stack.extend(E.step(s, a)[0] for a in E.feasible_actions(s))
        for members in groups.values():
            if len(members) >= 2 and len(pairs) < count:
                i, j = rng.choice(len(members), size=2, replace=False)
                pairs.append((members[i], members[j]))
    return pairs


def _greedy_completion(state, params, config):
    acts = []
    while not state.done:
        act = P.forward(E.extract_features(state), params, config).greedy()
        acts.append(act)
        state, _ = E.step(state, act)
    return acts, E.makespan(state)


def _spt_completion(state):
    acts = []
    while not state.done:
        act = R.pdr_select(state, R.Rule.SPT)
        acts.append(act)
        state, _ = E.step(state, act)
    return acts, E.makespan(state)


def test_criterion_03_markov_hash_property(acceptance_note):
    rng = np.random.default_rng(3)
    pairs = _hash_pairs(100, rng)
    cfg = T.desk_policy_config()
    params = P.init_params(cfg, 11)
    ok = 0
    for a, b in pairs:
        assert E.canonical_hash(a) == E.canonical_hash(b)
        assert not (np.array_equal(a.machine_of, b.machine_of) and np.array_equal(a.start, b.start))
        same = (_greedy_completion(a, params, cfg) == _greedy_completion(b, params, cfg)
                and _spt_completion(a) == _spt_completion(b))
        ok += same
    acceptance_note(f"c3: {ok}/100 hash-equal pairs with identical greedy completions and makespans")
    assert ok == 100


# --------------------------------------------------------------------------- 4

@pytest.mark.parametrize("name", sorted(test_autodiff.PRIMITIVE_CASES))
def test_criterion_04_primitive_gradients(name):
    errs = test_autodiff.primitive_fd_errors(name, configs=20, seed=4)
    assert len(errs) == 20 and max(errs) <= 1e-4


@pytest.mark.parametrize("objective", ["neg_log_prob", "reinforce", "ppo"])
def test_criterion_04_end_to_end_gradients(objective, acceptance_note):
    fn = {"neg_log_prob": lambda s: test_policy.policy_fd_error(s, test_training.TOY),
          "reinforce": test_training.reinforce_fd_error,
          "ppo": test_training.ppo_fd_error}[objective]
    errs = [fn(s) for s in range(20)]
    acceptance_note(f"c4: {objective} worst relative FD error over 20 configs {max(errs):.2e}")
    assert max(errs) <= 1e-3


# --------------------------------------------------------------------------- 5

def test_criterion_05_rope_shift_invariance():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(500):
        dh = 2 * int(rng.integers(1, 17))
        q, k = rng.standard_normal((1, dh)), rng.standard_normal((1, dh))
        a, b, c = (int(x) for x in rng.integers(0, 100, size=3))
        lhs = P.rope_rotate(q, np.array([a])) @ P.rope_rotate(k, np.array([b])).T
        rhs = P.rope_rotate(q, np.array([a + c])) @ P.rope_rotate(k, np.array([b + c])).T
        worst = max(worst, float(np.abs(lhs - rhs).max()))
    assert worst <= 1e-9
    # whole op branch: shifting every intra-job position leaves embeddings unchanged
    cfg = P.PolicyConfig(layers=2, heads=4, dim=32, ffn_dim=64)
    p = P.init_params(cfg, 5)
    inst = I.generate(I.GeneratorConfig("SD1", 6, 3, rng_seed=5))
    batch = P.collate([E.extract_features(E.reset(inst))])
    base = P.op_branch(p, cfg, batch)[-1].data
    batch.positions = batch.positions + 13
    assert np.abs(P.op_branch(p, cfg, batch)[-1].data - base).max() <= 1e-9


def test_criterion_05_masked_softmax_rows():
    rng = np.random.default_rng(6)
    for _ in range(500):
        shape = tuple(int(x) for x in rng.integers(1, 9, size=3))
        x = rng.standard_normal(shape) * 20
        mask = rng.random(shape) < 0.5
        mask[..., 0] = True
        y = A.softmax(A.Tensor(x), -1, mask).data
        assert np.all(y[~mask] == 0.0)
        assert np.abs(y.sum(-1) - 1.0).max() <= 1e-12
    # attention rows inside the model
    inst = I.generate(I.GeneratorConfig("SD1", 6, 4, rng_seed=6))
    att, _ = test_policy.machine_attention(test_policy.small_params(6), test_policy.SMALL,
                                           E.extract_features(test_policy.mid_state(inst, 5)))
    assert np.abs(att.sum(-1) - 1.0).max() <= 1e-12


def test_criterion_05_permutation_equivariance():
    assert max(test_policy.machine_equivariance_errors(20)) <= 1e-9
    assert max(test_policy.job_equivariance_errors(20)) <= 1e-9


def test_criterion_05_no_machine_to_operation_flow():
    for seed in range(10):
        err, moved = test_policy.m2o_absence_error(seed)
        assert err == 0.0 and moved > 0.0


# --------------------------------------------------------------------------- 6

def test_criterion_06_kv_cache_equivalence(acceptance_note):
    cfg = P.PolicyConfig()
    params = P.init_params(cfg, 6)
    worst = 0.0
    for k in range(50):
        variant, (n, m) = ("SD1", "SD2")[k % 2], ((6, 3), (10, 5))[(k // 2) % 2]
        inst = I.generate(I.GeneratorConfig(variant, n, m, rng_seed=100 + k))
        err, _ = test_policy.cache_episode_error(inst, params, cfg, k)
        worst = max(worst, err)
    acceptance_note(f"c6: cached vs cold max |dp| over 50 episodes {worst:.2e}")
    assert worst <= 1e-6


# --------------------------------------------------------------------------- 7

def test_criterion_07_spt_selects_duration_minimal_pair():
    insts = [I.generate(I.GeneratorConfig(v, 10, 5, rng_seed=s)) for v in ("SD1", "SD2") for s in range(25)]
    insts += [I.load_instance(str(p)) for p in _benchmark_files("brandimarte")]
    for inst in insts:
        s = E.reset(inst)
        d = inst.arrays.durations
        while not s.done:
            act = R.pdr_select(s, R.Rule.SPT)
            assert d[act.op, act.machine] == min(d[a.op, a.machine] for a in E.feasible_actions(s))
            s, _ = E.step(s, act)


def test_criterion_07_mwkr_brandimarte_gap(acceptance_note):
    files = _benchmark_files("brandimarte")
    _require(files, 10, "Brandimarte")
    refs = _reference_table()
    gaps = []
    for path in files:
        inst = I.load_instance(str(path))
        ref = EV.lookup_reference(refs, inst.name)
        assert ref is not None, f"no reference for {inst.name}"
        span, sched = R.pdr_rollout(inst, R.Rule.MWKR)
        validate_schedule(inst, sched, span)
        gaps.append(EV.gap(span, ref))
    avg = float(np.mean(gaps))
    acceptance_note(f"c7: MWKR instance-wise average gap on Brandimarte {avg:.2f}% (target 28.91 +- 5)")
    assert abs(avg - 28.91) <= 5.0


# --------------------------------------------------------------------------- 8

_DESK: dict[int, dict] = {}
_DESK_DIR = Path(tempfile.mkdtemp(prefix="fjsp-desk-"))
DESK_SEEDS = (1, 2, 3)
SEED_BUDGET_S = 30 * 60


def _desk(seed):
    if seed not in _DESK:
        _DESK[seed] = run_desk_check(seed, epochs=60, out_dir=str(_DESK_DIR / f"seed{seed}"))
    return _DESK[seed]


@pytest.mark.slow
@pytest.mark.parametrize("seed", DESK_SEEDS)
def test_criterion_08_desk_training_run(seed, acceptance_note):
    res = _desk(seed)
    rf, ppo = res["reinforce"], res["ppo"]
    acceptance_note(
        f"c8 seed {seed}: random {res['baselines']['random']:.2f} best PDR {res['best_pdr']:.2f} | "
        f"REINFORCE test {rf['test_greedy_mean']:.2f} val {rf['best_val']:.2f} ({rf['train_time']:.0f}s) | "
        f"PPO test {ppo['test_greedy_mean']:.2f} val {ppo['best_val']:.2f} ({ppo['train_time']:.0f}s)")
    assert rf["train_time"] <= SEED_BUDGET_S and ppo["train_time"] <= SEED_BUDGET_S


@pytest.mark.slow
def test_criterion_08_learning_verdict():
    results = [_desk(s) for s in DESK_SEEDS]
    learned = sum(r["reinforce"]["beats_random_by_5pct"] and r["reinforce"]["within_5pct_of_best_pdr"]
                  for r in results)
    ppo_ok = sum(r["ppo"]["best_val"] <= r["reinforce"]["best_val"] for r in results)
    assert learned >= 2, f"REINFORCE met both margins on {learned}/3 seeds"
    assert ppo_ok >= 2, f"PPO matched or beat REINFORCE validation on {ppo_ok}/3 seeds"


# --------------------------------------------------------------------------- 9

def test_criterion_09_every_schedule_validates():
    rng = np.random.default_rng(9)
    cfg = test_policy.SMALL
    params = test_policy.small_params(9)
    insts = [I.generate(I.GeneratorConfig(v, int(rng.integers(2, 8)), int(rng.integers(1, 5)),
                                          rng_seed=int(rng.integers(2**31))))
             for v in ("SD1", "SD2", "JSSP") for _ in range(15)]
    insts.append(I.generate(I.GeneratorConfig("FFSP", 8, 6, stages=3, machines_per_stage=2, rng_seed=1)))
    for inst in insts:
        for span, sched in (EV.decode_greedy(inst, params, cfg),
                            EV.decode_greedy(inst, params, cfg, use_cache=True),
                            EV.decode_sampling(inst, params, cfg, k=4, seed=1)):
            validate_schedule(inst, sched, span)
        for rule in R.Rule:
            span, sched = R.pdr_rollout(inst, rule, np.random.default_rng(0))
            validate_schedule(inst, sched, span)
            EV.emit_gantt(sched, inst.num_machines)
    for name, inst in list(I.taillard_instances().items())[:10]:
        span, sched = R.pdr_rollout(inst, R.Rule.MWKR)
        validate_schedule(inst, sched, span)


@pytest.mark.slow
def test_criterion_09_sampling_soft_metric(acceptance_note):
    """Reported, not gated: best-of-100 vs greedy for the trained desk-scale model."""
    cfg = desk_config(1)
    ckpt = _DESK_DIR / "seed1" / "reinforce" / "best.json"
    if ckpt.is_file():
        params, _ = P.load_checkpoint(ckpt, cfg.policy)
    else:
        params = T.train(cfg).best_params
    test_set = T.make_instances(cfg, T.TEST_STREAM + 10, 50)
    greedy, best = [], []
    for inst in test_set:
        g, gs = EV.decode_greedy(inst, params, cfg.policy)
        b, bs = EV.decode_sampling(inst, params, cfg.policy, k=100, seed=0)
        validate_schedule(inst, gs, g)
        validate_schedule(inst, bs, b)
        greedy.append(g)
        best.append(b)
    holds = np.mean(best) <= np.mean(greedy)
    acceptance_note(f"c9 (soft): mean best-of-100 {np.mean(best):.2f} vs mean greedy {np.mean(greedy):.2f} "
                    f"over 50 SD1 instances -> {'holds' if holds else 'does not hold'}")


# --------------------------------------------------------------------------- 10

def _round_trip_fjs(inst):
    text = I.write_fjs(inst)
    back = I.parse_fjs(text, inst.name)
    assert back == inst and I.write_fjs(back) == text


def test_criterion_10_taillard_round_trip_and_bounds():
    refs = _reference_table()
    tai = I.taillard_instances()
    assert len(tai) == 80
    for name, inst in tai.items():
        text = I.write_taillard(inst)
        assert I.parse_taillard_jssp(text, name) == inst
        assert I.write_taillard(I.parse_taillard_jssp(text, name)) == text
        _round_trip_fjs(inst)
        assert I.lower_bound_static(inst)[0] <= refs[name]


def test_criterion_10_brandimarte_round_trip_and_bounds():
    files = _benchmark_files("brandimarte")
    _require(files, 10, "Brandimarte")
    refs = _reference_table()
    for path in files:
        inst = I.load_instance(str(path))
        original = I.parse_fjs(path.read_text(), inst.name)
        _round_trip_fjs(original)
        ref = EV.lookup_reference(refs, inst.name)
        assert ref is not None and I.lower_bound_static(inst)[0] <= ref


def test_criterion_10_hurink_round_trip_and_bounds():
    refs = _reference_table()
    for sub in HURINK_SETS:
        files = _benchmark_files(f"hurink/{sub}")
        _require(files, HURINK_COUNT, f"Hurink {sub}")
        for path in files:
            inst = I.parse_fjs(path.read_text(), path.stem)
            _round_trip_fjs(inst)
            ref = EV.lookup_reference(refs, f"{sub}/{path.stem}") or EV.lookup_reference(refs, path.stem)
            if ref is not None:
                assert I.lower_bound_static(inst)[0] <= ref
