import csv
import io
import math

import numpy as np
import pytest

from fjsp_rl import autodiff as A
from fjsp_rl import env as E
from fjsp_rl import instances as I
from fjsp_rl import policy as P
from fjsp_rl import training as T
from fjsp_rl.autodiff import Tape

from conftest import random_instance

TOY = P.PolicyConfig(layers=1, heads=2, dim=4, ffn_dim=8, head_hidden=4, head_layers=2)
TOY_CRITIC = P.PolicyConfig(layers=1, heads=2, dim=4, ffn_dim=8, head_hidden=4, head_layers=2,
                            critic_head=True)


def _toy_instances(rng, count):
    out = []
    while len(out) < count:
        inst = random_instance(rng, max_jobs=3, max_ops=2, max_machines=3, max_total=5)
        if inst.num_operations >= 3:
            out.append(inst)
    return out


def _toy_trajectories(seed, config, count=2):
    rng = np.random.default_rng(seed)
    insts = _toy_instances(rng, count)
    p = P.init_params(config, rng)
    trajs = T.collect_rollouts(insts, p, config, rng)
    return p, trajs


# --------------------------------------------------------------------------- returns / advantages

def test_discounted_returns_example():
    assert np.allclose(T.discounted_returns([1.0, 1.0], 0.99), [1.99, 1.0])


def test_timestep_advantages_example():
    adv = T.reinforce_advantages([np.array([1.0]), np.array([2.0]), np.array([3.0])])
    assert [a[0] for a in adv] == [-1.0, 0.0, 1.0]


def test_advantages_handle_ragged_lengths():
    adv = T.reinforce_advantages([np.array([1.0, 4.0]), np.array([3.0])])
    assert np.allclose(adv[0], [-1.0, 0.0]) and np.allclose(adv[1], [1.0])
    batch = T.reinforce_advantages([np.array([1.0, 4.0]), np.array([4.0])], scope="batch")
    assert np.allclose(np.concatenate(batch), [-2.0, 1.0, 1.0])


def test_gae_lambda_zero_is_td_error():
    r, v = np.array([1.0, 2.0, 0.5]), np.array([0.3, -0.2, 0.7])
    adv, ret = T.gae(r, v, 0.9, 0.0)
    vn = np.append(v, 0.0)
    assert np.allclose(adv, r + 0.9 * vn[1:] - v)
    assert np.allclose(ret, adv + v)


def test_gae_monte_carlo_case():
    r, v = np.array([1.0, 2.0, 0.5]), np.array([0.3, -0.2, 0.7])
    adv, _ = T.gae(r, v, 1.0, 1.0)
    assert np.allclose(adv, np.cumsum(r[::-1])[::-1] - v)


def test_gae_hand_example():
    adv, ret = T.gae([1.0, 1.0], [0.5, 0.5], 1.0, 0.98)
    d1 = 1.0 + 0.0 - 0.5
    d0 = 1.0 + 0.5 - 0.5
    assert np.allclose(adv, [d0 + 0.98 * d1, d1])
    assert np.allclose(ret, [1.99, 1.0])


def test_gae_length_mismatch():
    with pytest.raises(ValueError):
        T.gae([1.0, 1.0], [0.1], 1.0, 0.9)


# --------------------------------------------------------------------------- rollouts

def test_rollouts_deterministic_and_complete():
    insts = [I.generate(I.GeneratorConfig("SD1", 4, 3, rng_seed=s)) for s in range(3)]
    p = P.init_params(TOY, 0)
    a = T.collect_rollouts(insts, p, TOY, 5)
    b = T.collect_rollouts(insts, p, TOY, 5)
    for ta, tb, inst in zip(a, b, insts):
        assert ta.actions == tb.actions and ta.makespan == tb.makespan
        assert len(ta.actions) == len(ta.rewards) == inst.num_operations
        assert sum(ta.rewards) == ta.lb0 - ta.makespan


def test_on_policy_purity():
    p, trajs = _toy_trajectories(1, TOY, count=3)
    for tr in trajs:
        for f, a, lp in zip(tr.features, tr.actions, tr.log_probs):
            out = P.forward(f, p, TOY)
            assert abs(out.log_probs[out.actions.index(a)] - lp) <= 1e-9


def test_batched_rollout_matches_single_episodes():
    insts = [I.generate(I.GeneratorConfig("SD2", 3 + k, 3, rng_seed=k)) for k in range(3)]
    p = P.init_params(TOY, 3)
    rngs = [np.random.default_rng(k) for k in range(3)]
    batched = T.run_episodes(insts, p, TOY, rngs)
    for k, inst in enumerate(insts):
        single = T.run_episodes([inst], p, TOY, [np.random.default_rng(k)])[0]
        assert single.actions == batched[k].actions


def test_greedy_rollout_ignores_rng():
    inst = I.generate(I.GeneratorConfig("SD1", 4, 3, rng_seed=9))
    p = P.init_params(TOY, 4)
    a = T.run_episodes([inst], p, TOY, [np.random.default_rng(0)], greedy=True)[0]
    b = T.run_episodes([inst], p, TOY, [np.random.default_rng(1)], greedy=True)[0]
    assert a.actions == b.actions


# --------------------------------------------------------------------------- REINFORCE

def test_equal_returns_leave_params_unchanged():
    inst = I.Instance.from_lists([[[(0, 2)], [(1, 3)]], [[(1, 1)]]])
    p = P.init_params(TOY, 5)
    trajs = T.collect_rollouts([inst, inst], p, TOY, [np.random.default_rng(0), np.random.default_rng(0)])
    assert trajs[0].actions == trajs[1].actions
    before = p.copy()
    cfg = T.TrainConfig(policy=TOY, lr=1e-2)
    T.reinforce_update(trajs, p, A.OptimizerState.for_params(p.list(), lr=1e-2), cfg)
    assert all(np.array_equal(p[n].data, before[n].data) for n in p.names())


def test_single_trajectory_gradient_is_advantage_weighted_log_prob():
    p, trajs = _toy_trajectories(2, TOY, count=1)
    tr = trajs[0]
    A_val = 1.7
    advs = [np.full(len(tr.actions), A_val)]
    with Tape() as tape:
        loss, _ = T.reinforce_loss(trajs, p, TOY, advantages=advs)
    g_loss = A.gradients(tape, loss, p.list())
    total = [np.zeros_like(x.data) for x in p.list()]
    for f, a in zip(tr.features, tr.actions):
        batch = P.collate([f])
        idx = a.op * f.num_machines + a.machine
        with Tape() as tape:
            nl = A.neg(A.getitem(P.forward_batch(p, TOY, batch).log_probs, (0, idx)))
        for acc, g in zip(total, A.gradients(tape, nl, p.list())):
            acc += A_val * g
    assert max(np.abs(a - b).max() for a, b in zip(g_loss, total)) <= 1e-12


def reinforce_fd_error(seed):
    p, trajs = _toy_trajectories(seed, TOY)
    advs = T.reinforce_advantages([T.discounted_returns(np.asarray(t.rewards) / t.features[0].time_scale, 0.99)
                                   for t in trajs])
    advs = [a + np.random.default_rng(seed).standard_normal(len(a)) for a in advs]   # avoid all-zero
    return A.finite_diff_check(lambda: T.reinforce_loss(trajs, p, TOY, advantages=advs)[0],
                               p.list(), tolerance=1e-3, h=1e-5).max_rel_error


def ppo_fd_error(seed):
    p, trajs = _toy_trajectories(seed, TOY_CRITIC)
    rng = np.random.default_rng([seed, 1])
    buf = T.build_buffer(trajs, 1.0, 0.98)
    for t in buf:
        # move old log-probs and values off the current ones so the clipped branches are exercised
        t.old_log_prob += float(rng.choice([-1, 1]) * rng.uniform(0.05, 0.6))
        t.old_value += float(rng.choice([-1, 1]) * rng.uniform(0.05, 0.6))
        t.advantage += float(rng.standard_normal())
    return A.finite_diff_check(lambda: T.ppo_loss(buf, p, TOY_CRITIC)[0], p.list(),
                               tolerance=1e-3, h=1e-5).max_rel_error


def test_reinforce_loss_gradient_matches_finite_differences():
    assert reinforce_fd_error(0) <= 1e-3


def test_ppo_loss_gradient_matches_finite_differences():
    assert ppo_fd_error(0) <= 1e-3


# --------------------------------------------------------------------------- PPO

def test_ppo_ratio_identity():
    p, trajs = _toy_trajectories(3, TOY_CRITIC)
    buf = T.build_buffer(trajs, 1.0, 0.98)
    _, parts = T.ppo_loss(buf, p, TOY_CRITIC, value_coef=0.0, entropy_coef=0.0)
    assert parts.policy == pytest.approx(-np.mean([t.advantage for t in buf]), abs=1e-12)


def test_ppo_clipped_term_has_zero_gradient():
    p, trajs = _toy_trajectories(4, TOY_CRITIC, count=1)
    buf = T.build_buffer(trajs, 1.0, 0.98)[:1]
    buf[0].advantage = 1.0
    buf[0].old_log_prob -= 0.5              # ratio = e^0.5 > 1.2
    with Tape() as tape:
        loss, _ = T.ppo_loss(buf, p, TOY_CRITIC, value_coef=0.0, entropy_coef=0.0)
    assert all(np.all(g == 0.0) for g in A.gradients(tape, loss, p.list()))


def test_entropy_of_uniform_policy_is_log_k():
    inst = I.Instance.from_lists([[[(0, 2), (1, 3), (2, 4)]], [[(0, 1), (1, 1)]]])
    p = P.init_params(TOY_CRITIC, 0)
    for name in p.names():
        if name.startswith("head."):
            p[name].data = np.zeros_like(p[name].data)
    s = E.reset(inst)
    k = len(E.feasible_actions(s))
    tr = T.Transition(E.extract_features(s), E.feasible_actions(s)[0], -math.log(k), 0.0, 0.0, 0.0)
    _, parts = T.ppo_loss([tr], p, TOY_CRITIC, value_coef=0.0, entropy_coef=1.0)
    assert -parts.entropy == pytest.approx(math.log(5), abs=1e-12) and k == 5


def ppo_reinforce_cosine(seed):
    """PPO with huge clip, zero value/entropy weight, lambda=1 vs the REINFORCE gradient."""
    p, trajs = _toy_trajectories(seed, TOY_CRITIC, count=3)
    buf = T.build_buffer(trajs, 1.0, 1.0, scale_rewards=True)
    for t in buf:
        t.advantage = t.ret                 # lambda=1, gamma=1 with a zero baseline
    with Tape() as tape:
        loss, _ = T.ppo_loss(buf, p, TOY_CRITIC, clip_eps=1e9, value_coef=0.0, entropy_coef=0.0)
    g_ppo = np.concatenate([g.ravel() for g in A.gradients(tape, loss, p.list())])
    advs = [T.discounted_returns(np.asarray(t.rewards) / t.features[0].time_scale, 1.0) for t in trajs]
    with Tape() as tape:
        loss, _ = T.reinforce_loss(trajs, p, TOY_CRITIC, advantages=advs)
    g_rf = np.concatenate([g.ravel() for g in A.gradients(tape, loss, p.list())])
    return float(g_ppo @ g_rf / (np.linalg.norm(g_ppo) * np.linalg.norm(g_rf)))


def test_ppo_reduces_to_reinforce_direction():
    assert ppo_reinforce_cosine(5) >= 0.999


def test_ppo_update_changes_params_and_reports_losses():
    p, trajs = _toy_trajectories(6, TOY_CRITIC)
    buf = T.build_buffer(trajs, 1.0, 0.98)
    cfg = T.TrainConfig(algorithm="ppo", policy=TOY_CRITIC, ppo_epochs=2, minibatch=4, lr=1e-3)
    before = p.copy()
    _, hist = T.ppo_update(buf, p, A.OptimizerState.for_params(p.list(), lr=1e-3), cfg,
                           np.random.default_rng(0))
    assert len(hist) == 2 * math.ceil(len(buf) / 4)
    assert any(not np.array_equal(p[n].data, before[n].data) for n in p.names())


def test_build_buffer_needs_values():
    _, trajs = _toy_trajectories(7, TOY)
    with pytest.raises(T.TrainingError):
        T.build_buffer(trajs, 1.0, 0.98)


# --------------------------------------------------------------------------- config and loop

def _tiny_train_config(**kw):
    base = dict(epochs=3, instances_per_epoch=4, batch_size=2, validation_size=3, num_jobs=3,
                num_machines=2, policy=TOY, lr=1e-3, seed=3)
    base.update(kw)
    return T.TrainConfig(**base)


def test_train_config_round_trip_and_errors():
    cfg = _tiny_train_config()
    assert T.TrainConfig.loads(cfg.dumps()) == cfg
    with pytest.raises(I.ConfigError):
        T.TrainConfig.from_dict({"epochs": 3, "bogus": 1})
    with pytest.raises(I.ConfigError):
        T.TrainConfig(algorithm="a2c")
    with pytest.raises(I.ConfigError):
        T.TrainConfig.loads("[1, 2]")
    assert T.TrainConfig(algorithm="ppo").policy.critic_head


def test_instance_streams_are_disjoint_and_reproducible():
    cfg = _tiny_train_config()
    a = T.make_instances(cfg, T.TRAIN_STREAM, 3, epoch=1)
    assert a == T.make_instances(cfg, T.TRAIN_STREAM, 3, epoch=1)
    assert a != T.make_instances(cfg, T.TRAIN_STREAM, 3, epoch=2)
    assert a != T.make_instances(cfg, T.VALID_STREAM, 3)


@pytest.mark.parametrize("algorithm", ["reinforce", "ppo"])
def test_train_report_and_outputs(tmp_path, algorithm):
    cfg = _tiny_train_config(algorithm=algorithm)
    rep = T.train(cfg, out_dir=str(tmp_path))
    assert [r.epoch for r in rep.rows] == [1, 2, 3]
    rows = list(csv.reader(io.StringIO((tmp_path / "report.csv").read_text())))
    assert tuple(rows[0]) == T.TrainReport.CSV_HEADER and len(rows) == 4
    params, pcfg = P.load_checkpoint(tmp_path / "best.json")
    assert pcfg == cfg.policy
    assert rep.best_val == min([rep.initial_val] + [r.val_mean_makespan for r in rep.rows])
    val_set = T.make_instances(cfg, T.VALID_STREAM, cfg.validation_size)
    assert T.validate(params, pcfg, val_set) == rep.best_val


def test_resume_reproduces_uninterrupted_run(tmp_path):
    cfg = _tiny_train_config()
    full = T.train(cfg)
    T.train(cfg, out_dir=str(tmp_path), stop_after=2)
    resumed = T.train(cfg, out_dir=str(tmp_path), resume=str(tmp_path / "state.json"))
    for n in full.final_params.names():
        assert np.array_equal(full.final_params[n].data, resumed.final_params[n].data)
    assert [r.val_mean_makespan for r in full.rows] == [r.val_mean_makespan for r in resumed.rows]


def test_resume_rejects_other_config(tmp_path):
    T.train(_tiny_train_config(), out_dir=str(tmp_path), stop_after=1)
    with pytest.raises(I.ConfigError):
        T.train(_tiny_train_config(lr=5e-4), resume=str(tmp_path / "state.json"))


def test_training_is_deterministic():
    a = T.train(_tiny_train_config(epochs=2))
    b = T.train(_tiny_train_config(epochs=2))
    assert [r.loss for r in a.rows] == [r.loss for r in b.rows]
