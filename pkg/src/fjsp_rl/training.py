"""REINFORCE and PPO trainers over batched rollouts.

Episodes in a batch advance in lockstep through one batched forward pass per
step. Each episode draws from its own generator derived from
``(root seed, epoch, batch, episode)``, so results do not depend on how
episodes are grouped or distributed.
"""
from __future__ import annotations

import csv
import io
import json
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from . import env as E
from . import policy as P
from .autodiff import OptimizerState, Tape, TrainingError
from .instances import ConfigError, GeneratorConfig, Instance, generate

TRAIN_STREAM, VALID_STREAM, TEST_STREAM, SAMPLE_STREAM, SHUFFLE_STREAM = range(5)
STATE_FORMAT = "fjsp-train-state"
STATE_VERSION = 1


def stream_rng(*key: int) -> np.random.Generator:
    """Independent generator for an integer key path."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def desk_policy_config(**kw) -> P.PolicyConfig:
    base = dict(layers=1, heads=4, dim=32, ffn_dim=128)
    base.update(kw)
    return P.PolicyConfig(**base)


@dataclass
class TrainConfig:
    algorithm: str = "reinforce"
    epochs: int = 60
    instances_per_epoch: int = 128
    batch_size: int = 32
    lr: float = 5e-5
    gamma: float = 0.99
    ppo_gamma: float = 1.0
    gae_lambda: float = 0.98
    clip_eps: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    ppo_epochs: int = 4
    minibatch: int = 512
    reward_mode: str = "lower_bound"
    scale_rewards: bool = True
    advantage_scope: str = "timestep"
    max_grad_norm: float | None = None
    seed: int = 1
    variant: str = "SD1"
    num_jobs: int = 6
    num_machines: int = 3
    validation_size: int = 100
    policy: P.PolicyConfig = field(default_factory=desk_policy_config)

    def __post_init__(self):
        if isinstance(self.policy, dict):
            object.__setattr__(self, "policy", P.PolicyConfig.from_dict(self.policy))
        if self.algorithm not in ("reinforce", "ppo"):
            raise ConfigError(f"algorithm must be reinforce or ppo, got {self.algorithm!r}")
        if self.advantage_scope not in ("timestep", "batch"):
            raise ConfigError("advantage_scope must be 'timestep' or 'batch'")
        for name in ("epochs", "instances_per_epoch", "batch_size", "ppo_epochs", "minibatch",
                     "validation_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        E.RewardMode.parse(self.reward_mode)
        GeneratorConfig(self.variant, self.num_jobs, self.num_machines)
        if self.algorithm == "ppo" and not self.policy.critic_head:
            self.policy = replace(self.policy, critic_head=True)

    def generator(self, seed: int) -> GeneratorConfig:
        return GeneratorConfig(self.variant, self.num_jobs, self.num_machines, rng_seed=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["policy"] = self.policy.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**data)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "TrainConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)


def make_instances(config: TrainConfig, stream: int, count: int, epoch: int = 0) -> list[Instance]:
    """Deterministic instance sets: stream separates train / validation / test."""
    out = []
    for i in range(count):
        seed = int(np.random.SeedSequence([config.seed, stream, epoch, i]).generate_state(1)[0])
        out.append(generate(config.generator(seed)))
    return out


# --------------------------------------------------------------------------- rollouts

@dataclass
class Trajectory:
    instance: Instance
    features: list[E.StateFeatures] = field(default_factory=list)
    actions: list[E.Action] = field(default_factory=list)
    log_probs: list[float] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    makespan: int | None = None
    lb0: int = 0
    schedule: list[E.ScheduledOp] = field(default_factory=list)

    def __len__(self):
        return len(self.actions)


def _sample_index(probs: np.ndarray, rng: np.random.Generator) -> int:
    # side="right" lands on an index where the cumulative sum steps up, i.e. a
    # positive-probability entry; only rounding at the top end can overshoot
    c = np.cumsum(probs)
    k = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
    if k >= len(probs) or probs[k] <= 0:
        k = int(np.flatnonzero(probs > 0)[-1])
    return k


def run_episodes(instances: list[Instance], params: P.PolicyParameters, config: P.PolicyConfig,
                 rngs: list[np.random.Generator] | None = None, greedy: bool = False,
                 reward_mode=E.RewardMode.LOWER_BOUND, record: bool = True,
                 chunk: int = 256) -> list[Trajectory]:
    """Roll every instance to completion, sampling (or argmax) from the policy."""
    if not greedy and (rngs is None or len(rngs) != len(instances)):
        raise ValueError("sampling needs one rng per instance")
    trajs = []
    for lo in range(0, len(instances), chunk):
        sub = instances[lo:lo + chunk]
        sub_rngs = None if rngs is None else rngs[lo:lo + chunk]
        trajs.extend(_run_chunk(sub, params, config, sub_rngs, greedy, reward_mode, record))
    return trajs


def _run_chunk(instances, params, config, rngs, greedy, reward_mode, record):
    states = [E.reset(inst, reward_mode) for inst in instances]
    trajs = [Trajectory(inst, lb0=states[i].lower_bound) for i, inst in enumerate(instances)]
    while True:
        active = [i for i, s in enumerate(states) if not s.done]
        if not active:
            break
        feats = [E.extract_features(states[i]) for i in active]
        out = P.forward_batch(params, config, P.collate(feats))
        if not np.all(np.isfinite(out.probs)):
            raise TrainingError("policy produced non-finite probabilities")
        for row, i in enumerate(active):
            probs = out.probs[row]
            k = int(np.argmax(probs)) if greedy else _sample_index(probs, rngs[i])
            action = out.decode(k)
            tr = trajs[i]
            if record:
                tr.features.append(feats[row])
                tr.log_probs.append(float(out.log_probs.data[row, k]))
                if out.value is not None:
                    tr.values.append(float(out.value.data[row]))
            tr.actions.append(action)
            states[i], r = E.step(states[i], action)
            tr.rewards.append(r)
    for tr, s in zip(trajs, states):
        tr.makespan = E.makespan(s)
        tr.schedule = s.schedule()
    return trajs


def collect_rollouts(instances: list[Instance], params: P.PolicyParameters, config: P.PolicyConfig,
                     rng, reward_mode=E.RewardMode.LOWER_BOUND) -> list[Trajectory]:
    """One sampled episode per instance. ``rng`` is a seed, a Generator, or one Generator per instance."""
    if isinstance(rng, (list, tuple)):
        rngs = list(rng)
    else:
        root = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        rngs = root.spawn(len(instances))
    return run_episodes(instances, params, config, rngs, greedy=False, reward_mode=reward_mode)


# --------------------------------------------------------------------------- returns and advantages

def discounted_returns(rewards, gamma: float) -> np.ndarray:
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def reinforce_advantages(returns: list[np.ndarray], scope: str = "timestep") -> list[np.ndarray]:
    """Subtract the batch mean of G_t, per timestep (episodes present at t) or over everything."""
    if scope == "batch":
        mu = np.concatenate(returns).mean()
        return [g - mu for g in returns]
    T = max(len(g) for g in returns)
    sums, counts = np.zeros(T), np.zeros(T)
    for g in returns:
        sums[:len(g)] += g
        counts[:len(g)] += 1
    mu = sums / np.maximum(counts, 1)
    return [g - mu[:len(g)] for g in returns]


def gae(rewards, values, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates and returns (= advantages + values).

    ``values`` has one entry per reward, optionally followed by the bootstrap
    value of the final state; a missing bootstrap is taken as 0 (terminal).
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    T = len(r)
    if len(v) == T:
        v = np.append(v, 0.0)
    if len(v) != T + 1:
        raise ValueError(f"{T} rewards need {T} or {T + 1} values, got {len(values)}")
    adv = np.zeros(T)
    acc = 0.0
    for t in range(T - 1, -1, -1):
        delta = r[t] + gamma * v[t + 1] - v[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
    return adv, adv + v[:T]


def _scaled_rewards(tr: Trajectory, scale: bool) -> np.ndarray:
    r = np.asarray(tr.rewards, dtype=np.float64)
    if scale and tr.features:
        r = r / tr.features[0].time_scale
    return r


# --------------------------------------------------------------------------- losses

def _taped_policy(params, pcfg, feats, actions):
    out = P.forward_batch(params, pcfg, P.collate(feats))
    M = out.num_machines
    flat = np.array([a.op * M + a.machine for a in actions])
    lp = ad.getitem(out.log_probs, (np.arange(len(actions)), flat))
    return out, lp


def reinforce_loss(trajectories: list[Trajectory], params: P.PolicyParameters, pcfg: P.PolicyConfig,
                   gamma: float = 0.99, scope: str = "timestep", scale_rewards: bool = True,
                   advantages: list[np.ndarray] | None = None):
    """Taped loss ``mean_episodes(-sum_t A_t log pi(a_t|s_t))``; returns (loss, advantages)."""
    if advantages is None:
        returns = [discounted_returns(_scaled_rewards(tr, scale_rewards), gamma) for tr in trajectories]
        advantages = reinforce_advantages(returns, scope)
    feats = [f for tr in trajectories for f in tr.features]
    actions = [a for tr in trajectories for a in tr.actions]
    _, lp = _taped_policy(params, pcfg, feats, actions)
    weights = np.concatenate(advantages) * (-1.0 / len(trajectories))
    return ad.tsum(lp * weights), advantages


def reinforce_update(trajectories: list[Trajectory], params: P.PolicyParameters, opt: OptimizerState,
                     config: TrainConfig) -> tuple[P.PolicyParameters, float]:
    with Tape() as tape:
        loss, _ = reinforce_loss(trajectories, params, config.policy, config.gamma,
                                 config.advantage_scope, config.scale_rewards)
    plist = params.list()
    grads = ad.gradients(tape, loss, plist)
    ad.adam_step(plist, grads, opt, config.max_grad_norm)
    return params, float(loss.data)


@dataclass
class Transition:
    features: E.StateFeatures
    action: E.Action
    old_log_prob: float
    old_value: float
    advantage: float
    ret: float


def build_buffer(trajectories: list[Trajectory], gamma: float, lam: float,
                 scale_rewards: bool = True) -> list[Transition]:
    buf = []
    for tr in trajectories:
        if len(tr.values) != len(tr):
            raise TrainingError("PPO needs value estimates recorded during collection")
        adv, ret = gae(_scaled_rewards(tr, scale_rewards), tr.values, gamma, lam)
        for t in range(len(tr)):
            buf.append(Transition(tr.features[t], tr.actions[t], tr.log_probs[t], tr.values[t],
                                  float(adv[t]), float(ret[t])))
    return buf


@dataclass
class PPOLosses:
    total: float
    policy: float
    value: float
    entropy: float


def ppo_loss(batch: list[Transition], params: P.PolicyParameters, pcfg: P.PolicyConfig,
             clip_eps: float = 0.2, value_coef: float = 0.5, entropy_coef: float = 0.01):
    """Clipped surrogate + clipped value loss + entropy term; returns (loss tensor, PPOLosses)."""
    out, lp = _taped_policy(params, pcfg, [t.features for t in batch], [t.action for t in batch])
    old_lp = np.array([t.old_log_prob for t in batch])
    adv = np.array([t.advantage for t in batch])
    ret = np.array([t.ret for t in batch])
    old_v = np.array([t.old_value for t in batch])
    ratio = ad.exp(lp - old_lp)
    if not np.all(np.isfinite(ratio.data)):
        raise TrainingError("non-finite probability ratio")
    surr = ad.minimum(ratio * adv, ad.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv)
    l_policy = -ad.mean(surr)
    n = len(batch)
    if out.value is None:
        raise ConfigError("PPO needs a policy with a critic head")
    v = out.value
    v_clip = ad.clip(v - old_v, -clip_eps, clip_eps) + old_v
    l_value = ad.mean(ad.maximum(ad.square(v - ret), ad.square(v_clip - ret)))
    p = ad.exp(out.log_probs) * out.mask.astype(np.float64)
    entropy = -ad.tsum(p * out.log_probs) * (1.0 / n)
    l_entropy = -entropy
    loss = l_policy + value_coef * l_value + entropy_coef * l_entropy
    return loss, PPOLosses(float(loss.data), float(l_policy.data), float(l_value.data), float(l_entropy.data))


def ppo_update(buffer: list[Transition], params: P.PolicyParameters, opt: OptimizerState,
               config: TrainConfig, rng: np.random.Generator) -> tuple[P.PolicyParameters, list[PPOLosses]]:
    plist = params.list()
    history = []
    for _ in range(config.ppo_epochs):
        order = rng.permutation(len(buffer))
        for lo in range(0, len(buffer), config.minibatch):
            mb = [buffer[i] for i in order[lo:lo + config.minibatch]]
            with Tape() as tape:
                loss, parts = ppo_loss(mb, params, config.policy, config.clip_eps,
                                       config.value_coef, config.entropy_coef)
            ad.adam_step(plist, ad.gradients(tape, loss, plist), opt, config.max_grad_norm)
            history.append(parts)
    return params, history


# --------------------------------------------------------------------------- training loop

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    mean_makespan: float
    val_mean_makespan: float
    wall_time: float


@dataclass
class TrainReport:
    config: TrainConfig
    initial_val: float
    rows: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = float("inf")
    best_checkpoint: str | None = None
    best_params: P.PolicyParameters | None = None
    final_params: P.PolicyParameters | None = None

    CSV_HEADER = ("epoch", "loss", "mean_makespan", "val_mean_makespan", "wall_time")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_HEADER)
        for r in self.rows:
            w.writerow((r.epoch, repr(r.loss), repr(r.mean_makespan), repr(r.val_mean_makespan),
                        f"{r.wall_time:.3f}"))
        return buf.getvalue()


def validate(params: P.PolicyParameters, pcfg: P.PolicyConfig, instances: list[Instance]) -> float:
    trajs = run_episodes(instances, params, pcfg, greedy=True, record=False)
    return float(np.mean([t.makespan for t in trajs]))


def _state_dict(epoch, params, best, opt, report) -> dict:
    return {
        "format": STATE_FORMAT, "version": STATE_VERSION, "epoch": epoch,
        "config": report.config.to_dict(),
        "params": P.checkpoint_dict(params, report.config.policy),
        "best_params": P.checkpoint_dict(best, report.config.policy),
        "optimizer": opt.to_dict(),
        "initial_val": report.initial_val, "best_epoch": report.best_epoch, "best_val": report.best_val,
        "rows": [asdict(r) for r in report.rows],
    }


def save_train_state(path, epoch, params, best, opt, report) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(_state_dict(epoch, params, best, opt, report), fh)
    os.replace(tmp, path)


def load_train_state(path):
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if data.get("format") != STATE_FORMAT or data.get("version") != STATE_VERSION:
        raise P.CheckpointError(f"{path} is not a training state file of version {STATE_VERSION}")
    config = TrainConfig.from_dict(data["config"])
    params, _ = P.params_from_checkpoint_dict(data["params"], config.policy)
    best, _ = P.params_from_checkpoint_dict(data["best_params"], config.policy)
    opt = OptimizerState.from_dict(data["optimizer"])
    report = TrainReport(config, data["initial_val"], [EpochRecord(**r) for r in data["rows"]],
                         data["best_epoch"], data["best_val"])
    return data["epoch"], params, best, opt, report


def train(config: TrainConfig, out_dir: str | None = None, resume: str | None = None,
          stop_after: int | None = None, log=None) -> TrainReport:
    """Train, validating greedily after every epoch and keeping the best parameters.

    ``out_dir`` receives ``best.json`` (policy checkpoint), ``state.json``
    (resumable state) and ``report.csv``. ``stop_after`` ends the run early
    after that many epochs in total, as if interrupted.
    """
    pcfg = config.policy
    val_set = make_instances(config, VALID_STREAM, config.validation_size)
    if resume:
        start, params, best, opt, report = load_train_state(resume)
        if report.config.to_dict() != config.to_dict():
            raise ConfigError("resume state was produced with a different configuration")
        report.config = config
    else:
        params = P.init_params(pcfg, stream_rng(config.seed, 99))
        opt = OptimizerState.for_params(params.list(), lr=config.lr)
        init_val = validate(params, pcfg, val_set)
        report = TrainReport(config, init_val, best_val=init_val, best_epoch=0)
        best = params.copy()
        start = 0
    mode = E.RewardMode.parse(config.reward_mode)
    last = config.epochs if stop_after is None else min(config.epochs, stop_after)
    for epoch in range(start + 1, last + 1):
        t0 = time.perf_counter()
        pool = make_instances(config, TRAIN_STREAM, config.instances_per_epoch, epoch)
        losses, spans = [], []
        for b, lo in enumerate(range(0, len(pool), config.batch_size)):
            insts = pool[lo:lo + config.batch_size]
            rngs = [stream_rng(config.seed, SAMPLE_STREAM, epoch, b, i) for i in range(len(insts))]
            trajs = run_episodes(insts, params, pcfg, rngs, reward_mode=mode)
            spans.extend(t.makespan for t in trajs)
            if config.algorithm == "reinforce":
                _, loss = reinforce_update(trajs, params, opt, config)
                losses.append(loss)
            else:
                buf = build_buffer(trajs, config.ppo_gamma, config.gae_lambda, config.scale_rewards)
                _, hist = ppo_update(buf, params, opt, config, stream_rng(config.seed, SHUFFLE_STREAM, epoch, b))
                losses.extend(h.total for h in hist)
        val = validate(params, pcfg, val_set)
        rec = EpochRecord(epoch, float(np.mean(losses)), float(np.mean(spans)), val,
                          time.perf_counter() - t0)
        report.rows.append(rec)
        if val < report.best_val:
            report.best_val, report.best_epoch = val, epoch
            best = params.copy()
        if log:
            log(f"epoch {epoch:3d} loss {rec.loss:+.4f} train {rec.mean_makespan:.2f} "
                f"val {val:.2f} best {report.best_val:.2f}@{report.best_epoch} ({rec.wall_time:.1f}s)")
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            save_train_state(os.path.join(out_dir, "state.json"), epoch, params, best, opt, report)
    report.best_params = best
    report.final_params = params
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "best.json")
        P.save_checkpoint(path, best, pcfg, {"best_epoch": report.best_epoch, "best_val": report.best_val})
        report.best_checkpoint = path
        with open(os.path.join(out_dir, "report.csv"), "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
    return report
