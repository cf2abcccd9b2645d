"""Dual-branch Transformer policy over (operation, machine) pairs.

Operation branch: self-attention restricted to each op and its remaining
same-job successors, with rotary encoding of the intra-job index on Q and K.
Machine branch: each machine attends to itself and to the unscheduled ops it
can run; a projected duration vector ``e`` is added to the op-side query,
key and value. Decision head: an MLP scores every (op, machine) pair from
``[h_op, h_machine, edge]`` and a masked softmax over feasible pairs gives
the action distribution. An optional critic pools both embedding sets.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .env import Action, StateFeatures
from .instances import ConfigError

CHECKPOINT_FORMAT = "fjsp-policy"
CHECKPOINT_VERSION = 1


class PolicyError(ValueError):
    pass


class CacheError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    layers: int = 2
    heads: int = 8
    dim: int = 128
    ffn_dim: int = 512
    head_hidden: int = 64
    head_layers: int = 3
    rope_base: float = 10000.0
    activation: str = "relu"
    use_kv_cache: bool = False
    critic_head: bool = False

    def __post_init__(self):
        for name in ("layers", "heads", "dim", "ffn_dim", "head_hidden", "head_layers"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if (self.dim // self.heads) % 2:
            raise ConfigError(f"per-head dim {self.dim // self.heads} must be even for rotary encoding")
        if self.rope_base <= 0:
            raise ConfigError("rope_base must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"activation must be one of {sorted(_ACTIVATIONS)}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def architecture(self) -> dict:
        """Everything that fixes parameter shapes; runtime flags excluded."""
        d = asdict(self)
        d.pop("use_kv_cache")
        return d

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PolicyConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown policy config keys: {sorted(unknown)}")
        return cls(**data)


def _gelu(x: Tensor) -> Tensor:
    # tanh approximation built from primitives
    inner = (x + ad.mul(ad.mul(ad.square(x), x), 0.044715)) * math.sqrt(2.0 / math.pi)
    t = ad.sub(ad.div(2.0, ad.exp(ad.mul(inner, -2.0)) + 1.0), 1.0)
    return ad.mul(ad.mul(x, 0.5), ad.add(t, 1.0))


_ACTIVATIONS = {"relu": ad.relu, "gelu": _gelu}


# --------------------------------------------------------------------------- parameters

class PolicyParameters:
    """Ordered name -> Tensor map of every learnable weight."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __len__(self):
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def list(self) -> list[Tensor]:
        return list(self.tensors.values())

    def num_scalars(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def copy(self) -> "PolicyParameters":
        return PolicyParameters({k: Tensor(v.data.copy(), True, k) for k, v in self.tensors.items()})

    def assign(self, other: "PolicyParameters") -> None:
        for k, v in other.tensors.items():
            self.tensors[k].data = v.data.copy()

    def token(self) -> str:
        """Cheap content digest, used to detect parameter changes under a cache."""
        h = hashlib.sha1()
        for k, v in self.tensors.items():
            h.update(k.encode())
            h.update(v.data.tobytes())
        return h.hexdigest()


def parameter_shapes(config: PolicyConfig) -> dict[str, tuple[tuple[int, ...], int]]:
    """name -> (shape, fan_in). Norm gains/biases use fan_in 0."""
    d, f = config.dim, config.ffn_dim
    shapes: dict[str, tuple[tuple[int, ...], int]] = {}

    def lin(prefix, n_in, n_out):
        shapes[f"{prefix}.W"] = ((n_in, n_out), n_in)
        shapes[f"{prefix}.b"] = ((n_out,), n_in)

    def norm(prefix):
        shapes[f"{prefix}.g"] = ((d,), 0)
        shapes[f"{prefix}.b"] = ((d,), 0)

    lin("op_in", 2, d)
    lin("mach_in", 1, d)
    lin("edge_in", 1, d)
    for branch in ("op", "mach"):
        for layer in range(config.layers):
            p = f"{branch}{layer}"
            for proj in ("q", "k", "v", "o"):
                lin(f"{p}.{proj}", d, d)
            norm(f"{p}.ln1")
            lin(f"{p}.ff1", d, f)
            lin(f"{p}.ff2", f, d)
            norm(f"{p}.ln2")
    lin("head.edge", 1, d)
    widths = [3 * d] + [config.head_hidden] * (config.head_layers - 1) + [1]
    for i in range(config.head_layers):
        lin(f"head.l{i}", widths[i], widths[i + 1])
    if config.critic_head:
        widths = [2 * d] + [config.head_hidden] * (config.head_layers - 1) + [1]
        for i in range(config.head_layers):
            lin(f"critic.l{i}", widths[i], widths[i + 1])
    return shapes


def init_params(config: PolicyConfig, rng: np.random.Generator | int | None = 0) -> PolicyParameters:
    """Linear maps uniform in +-1/sqrt(fan_in); norms start at gain 1, bias 0."""
    rng = np.random.default_rng(rng)
    out = {}
    for name, (shape, fan_in) in parameter_shapes(config).items():
        if fan_in == 0:
            data = np.ones(shape) if name.endswith(".g") else np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        out[name] = Tensor(data, requires_grad=True, name=name)
    return PolicyParameters(out)


# --------------------------------------------------------------------------- batching

@dataclass
class Batch:
    op_x: np.ndarray        # [B, N, 2]
    mach_x: np.ndarray      # [B, M, 1]
    edge: np.ndarray        # [B, N, M]
    op_attn: np.ndarray     # [B, N, N] bool, self plus live same-job successors
    positions: np.ndarray   # [B, N]
    o2m: np.ndarray         # [B, N, M] bool
    feasible: np.ndarray    # [B, N, M] bool
    op_valid: np.ndarray    # [B, N] bool, unscheduled real ops
    mach_valid: np.ndarray  # [B, M] bool
    num_ops: list[int] = field(default_factory=list)
    num_machines: list[int] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.op_x.shape[0]


def collate(features: list[StateFeatures], pad_ops: int | None = None,
            pad_machines: int | None = None) -> Batch:
    """Pad a list of states to common (N, M). Padded ops attend only to themselves."""
    if not features:
        raise PolicyError("empty batch")
    B = len(features)
    N = max(pad_ops or 0, max(f.num_ops for f in features))
    M = max(pad_machines or 0, max(f.num_machines for f in features))
    op_x = np.zeros((B, N, 2))
    mach_x = np.zeros((B, M, 1))
    edge = np.zeros((B, N, M))
    attn = np.zeros((B, N, N), dtype=bool)
    attn[:, np.arange(N), np.arange(N)] = True
    pos = np.zeros((B, N))
    o2m = np.zeros((B, N, M), dtype=bool)
    feas = np.zeros((B, N, M), dtype=bool)
    op_valid = np.zeros((B, N), dtype=bool)
    mach_valid = np.zeros((B, M), dtype=bool)
    for b, f in enumerate(features):
        n, m = f.num_ops, f.num_machines
        op_x[b, :n] = f.op_features
        mach_x[b, :m] = f.mach_features
        edge[b, :n, :m] = f.edge_features
        attn[b, :n, :n] |= f.o2o_mask
        pos[b, :n] = f.positions
        o2m[b, :n, :m] = f.o2m_mask
        feas[b, :n, :m] = f.feasible_mask
        op_valid[b, :n] = f.op_valid
        mach_valid[b, :m] = True
    return Batch(op_x, mach_x, edge, attn, pos, o2m, feas, op_valid, mach_valid,
                 [f.num_ops for f in features], [f.num_machines for f in features])


# --------------------------------------------------------------------------- rotary encoding

def rope_angles(positions: np.ndarray, head_dim: int, base: float = 10000.0):
    """cos/sin tables of shape positions.shape + (head_dim // 2,)."""
    if head_dim % 2:
        raise ConfigError(f"rotary encoding needs an even head dim, got {head_dim}")
    theta = base ** (-2.0 * np.arange(head_dim // 2) / head_dim)
    ang = np.asarray(positions, dtype=np.float64)[..., None] * theta
    return np.cos(ang), np.sin(ang)


def rope_rotate(x, positions, base: float = 10000.0):
    """Rotate ``x[..., n, dh]`` at integer ``positions[..., n]``; returns an ndarray."""
    x = np.asarray(x, dtype=np.float64)
    cos, sin = rope_angles(positions, x.shape[-1], base)
    return ad.rope(Tensor(x), cos, sin).data


# --------------------------------------------------------------------------- layers

def _heads(x: Tensor, H: int) -> Tensor:
    """[B, T, d] -> [B, H, T, dh]"""
    B, T, d = x.shape
    return ad.transpose(ad.reshape(x, (B, T, H, d // H)), (0, 2, 1, 3))


def _merge(x: Tensor) -> Tensor:
    """[B, H, T, dh] -> [B, T, d]"""
    B, H, T, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (B, T, H * dh))


def _ffn_block(p: PolicyParameters, prefix: str, h: Tensor, attn_out: Tensor, act) -> Tensor:
    h = ad.layer_norm(h + ad.linear(attn_out, p[f"{prefix}.o.W"], p[f"{prefix}.o.b"]),
                      p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    f = ad.linear(act(ad.linear(h, p[f"{prefix}.ff1.W"], p[f"{prefix}.ff1.b"])),
                  p[f"{prefix}.ff2.W"], p[f"{prefix}.ff2.b"])
    return ad.layer_norm(h + f, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])


def op_branch_layer(p: PolicyParameters, config: PolicyConfig, layer: int, h: Tensor,
                    attn_mask: np.ndarray, positions: np.ndarray, return_attention: bool = False):
    """Masked multi-head self-attention over ops with rotary Q/K, then FFN (post-norm)."""
    H, dh = config.heads, config.head_dim
    pre = f"op{layer}"
    cos, sin = rope_angles(positions, dh, config.rope_base)
    cos, sin = cos[:, None], sin[:, None]                       # [B, 1, N, dh/2]
    q = ad.rope(_heads(ad.linear(h, p[f"{pre}.q.W"], p[f"{pre}.q.b"]), H), cos, sin)
    k = ad.rope(_heads(ad.linear(h, p[f"{pre}.k.W"], p[f"{pre}.k.b"]), H), cos, sin)
    v = _heads(ad.linear(h, p[f"{pre}.v.W"], p[f"{pre}.v.b"]), H)
    logits = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    att = ad.softmax(logits, axis=-1, mask=attn_mask[:, None])
    out = _ffn_block(p, pre, h, _merge(ad.matmul(att, v)), _ACTIVATIONS[config.activation])
    return (out, att.data) if return_attention else out


def edge_embedding(p: PolicyParameters, prefix: str, edge: np.ndarray) -> Tensor:
    """Scaled duration [B, N, M] -> [B, N, M, d] through one shared projection."""
    return ad.linear(Tensor(edge[..., None]), p[f"{prefix}.W"], p[f"{prefix}.b"])


def machine_branch_layer(p: PolicyParameters, config: PolicyConfig, layer: int, hm: Tensor,
                         ho: Tensor, e: Tensor, o2m: np.ndarray, return_attention: bool = False):
    """Cross-attention from machines to {self} and their live eligible ops.

    Op logits are ``(q_m + e)(k_o + e) / sqrt(dh)``, the self logit is
    ``q_m k_m / sqrt(dh)``; values are ``v_m`` for self and ``v_o + e`` for ops.
    Machine self K/V reuse the op K/V projections.
    """
    H, dh = config.heads, config.head_dim
    pre = f"mach{layer}"
    B, M, d = hm.shape
    N = ho.shape[1]
    q = _heads(ad.linear(hm, p[f"{pre}.q.W"], p[f"{pre}.q.b"]), H)          # [B,H,M,dh]
    ks = _heads(ad.linear(hm, p[f"{pre}.k.W"], p[f"{pre}.k.b"]), H)
    vs = _heads(ad.linear(hm, p[f"{pre}.v.W"], p[f"{pre}.v.b"]), H)
    ko = _heads(ad.linear(ho, p[f"{pre}.k.W"], p[f"{pre}.k.b"]), H)         # [B,H,N,dh]
    vo = _heads(ad.linear(ho, p[f"{pre}.v.W"], p[f"{pre}.v.b"]), H)
    E = ad.transpose(ad.reshape(e, (B, N, M, H, dh)), (0, 3, 2, 1, 4))       # [B,H,M,N,dh]
    qe = ad.reshape(q, (B, H, M, 1, dh)) + E
    ke = ad.reshape(ko, (B, H, 1, N, dh)) + E
    scale = 1.0 / math.sqrt(dh)
    op_logits = ad.tsum(qe * ke, axis=-1) * scale                            # [B,H,M,N]
    self_logit = ad.tsum(q * ks, axis=-1, keepdims=True) * scale             # [B,H,M,1]
    logits = ad.concat([self_logit, op_logits], axis=-1)
    mask = np.concatenate([np.ones((B, 1, M, 1), dtype=bool),
                           np.swapaxes(o2m, 1, 2)[:, None]], axis=-1)
    att = ad.softmax(logits, axis=-1, mask=mask)
    a_self = ad.getitem(att, (Ellipsis, slice(0, 1)))
    a_ops = ad.getitem(att, (Ellipsis, slice(1, None)))
    mixed = (a_self * vs + ad.matmul(a_ops, vo)
             + ad.tsum(ad.reshape(a_ops, (B, H, M, N, 1)) * E, axis=-2))
    out = _ffn_block(p, pre, hm, _merge(mixed), _ACTIVATIONS[config.activation])
    return (out, att.data) if return_attention else out


def _mlp(p: PolicyParameters, prefix: str, x: Tensor, n_layers: int) -> Tensor:
    for i in range(n_layers):
        x = ad.linear(x, p[f"{prefix}.l{i}.W"], p[f"{prefix}.l{i}.b"])
        if i < n_layers - 1:
            x = ad.relu(x)
    return x


def score_actions(p: PolicyParameters, config: PolicyConfig, ho: Tensor, hm: Tensor,
                  edge: np.ndarray) -> Tensor:
    """Per-pair scores [B, N, M] from MLP([h_op, h_machine, edge embedding]).

    The first layer is applied to each block of the concatenation separately
    and broadcast-added, which equals the concatenated form exactly.
    """
    B, N, d = ho.shape
    M = hm.shape[1]
    W0, b0 = p["head.l0.W"], p["head.l0.b"]
    w_op = ad.getitem(W0, slice(0, d))
    w_m = ad.getitem(W0, slice(d, 2 * d))
    w_e = ad.getitem(W0, slice(2 * d, 3 * d))
    ee = edge_embedding(p, "head.edge", edge)
    z = (ad.reshape(ad.matmul(ho, w_op), (B, N, 1, -1)) + ad.reshape(ad.matmul(hm, w_m), (B, 1, M, -1))
         + ad.matmul(ee, w_e) + b0)
    if config.head_layers == 1:
        return ad.reshape(z, (B, N, M))
    z = ad.relu(z)
    for i in range(1, config.head_layers):
        z = ad.linear(z, p[f"head.l{i}.W"], p[f"head.l{i}.b"])
        if i < config.head_layers - 1:
            z = ad.relu(z)
    return ad.reshape(z, (B, N, M))


def critic_value(p: PolicyParameters, config: PolicyConfig, ho: Tensor, hm: Tensor,
                 op_valid: np.ndarray, mach_valid: np.ndarray) -> Tensor:
    om = op_valid.astype(np.float64)[..., None]
    mm = mach_valid.astype(np.float64)[..., None]
    pooled_ops = ad.tsum(ho * om, axis=1) * (1.0 / np.maximum(om.sum(axis=1), 1.0))
    pooled_m = ad.tsum(hm * mm, axis=1) * (1.0 / np.maximum(mm.sum(axis=1), 1.0))
    v = _mlp(p, "critic", ad.concat([pooled_m, pooled_ops], axis=-1), config.head_layers)
    return ad.reshape(v, (v.shape[0],))


# --------------------------------------------------------------------------- forward

@dataclass
class BatchOutput:
    scores: Tensor          # [B, N, M]
    log_probs: Tensor       # [B, N*M], 0 on infeasible pairs
    probs: np.ndarray       # [B, N*M], exactly 0 on infeasible pairs
    mask: np.ndarray        # [B, N*M]
    value: Tensor | None
    num_machines: int
    op_embeddings: list[Tensor]
    mach_embeddings: list[Tensor]

    def decode(self, flat_index: int) -> Action:
        return Action(*divmod(int(flat_index), self.num_machines))


def op_branch(p: PolicyParameters, config: PolicyConfig, batch: Batch) -> list[Tensor]:
    """Op embeddings after each op layer (length ``config.layers``)."""
    h = ad.linear(Tensor(batch.op_x), p["op_in.W"], p["op_in.b"])
    outs = []
    for layer in range(config.layers):
        h = op_branch_layer(p, config, layer, h, batch.op_attn, batch.positions)
        outs.append(h)
    return outs


def head_forward(p: PolicyParameters, config: PolicyConfig, batch: Batch,
                 op_layers: list[Tensor]) -> BatchOutput:
    """Machine branch and decision head given the op branch outputs."""
    hm = ad.linear(Tensor(batch.mach_x), p["mach_in.W"], p["mach_in.b"])
    e = edge_embedding(p, "edge_in", batch.edge)
    mach_layers = []
    for layer in range(config.layers):
        hm = machine_branch_layer(p, config, layer, hm, op_layers[layer], e, batch.o2m)
        mach_layers.append(hm)
    ho = op_layers[-1]
    scores = score_actions(p, config, ho, hm, batch.edge)
    B, N, M = scores.shape
    mask = batch.feasible.reshape(B, N * M)
    if not mask.any(axis=1).all():
        raise PolicyError("a state in the batch has no feasible action")
    flat = ad.reshape(scores, (B, N * M))
    logp = ad.log_softmax(flat, axis=-1, mask=mask)
    probs = np.where(mask, np.exp(logp.data), 0.0)
    value = None
    if config.critic_head:
        value = critic_value(p, config, ho, hm, batch.op_valid, batch.mach_valid)
    return BatchOutput(scores, logp, probs, mask, value, M, op_layers, mach_layers)


def forward_batch(p: PolicyParameters, config: PolicyConfig, batch: Batch) -> BatchOutput:
    return head_forward(p, config, batch, op_branch(p, config, batch))


@dataclass
class PolicyOutput:
    actions: list[Action]       # feasible pairs, op-major order
    probs: np.ndarray           # aligned with actions, sums to 1
    log_probs: np.ndarray
    prob_matrix: np.ndarray     # [n, m], exactly 0 where infeasible
    scores: np.ndarray          # [n, m] raw pair scores
    value: float | None = None

    def greedy(self) -> Action:
        return self.actions[int(np.argmax(self.probs))]


def _single_output(out: BatchOutput, features: StateFeatures) -> PolicyOutput:
    n, m = features.num_ops, features.num_machines
    M = out.num_machines
    probs = out.probs[0].reshape(-1, M)[:n, :m]
    logp = out.log_probs.data[0].reshape(-1, M)[:n, :m]
    ops, machines = np.nonzero(features.feasible_mask)
    return PolicyOutput(
        actions=[Action(int(o), int(k)) for o, k in zip(ops, machines)],
        probs=probs[ops, machines], log_probs=logp[ops, machines],
        prob_matrix=probs.copy(), scores=out.scores.data[0, :n, :m].copy(),
        value=None if out.value is None else float(out.value.data[0]))


def forward(features: StateFeatures, params: PolicyParameters, config: PolicyConfig) -> PolicyOutput:
    if not features.feasible_mask.any():
        raise PolicyError("no feasible action in this state")
    return _single_output(forward_batch(params, config, collate([features])), features)


# --------------------------------------------------------------------------- op-branch cache

@dataclass
class KVCache:
    """Per-episode store of op-branch outputs, keyed per job.

    Op attention never crosses jobs, so a job whose live ops have the same
    input rows as before produces the same per-layer embeddings and can be
    reused as is.
    """
    instance_key: str | None = None
    params_token: str | None = None
    jobs: dict[int, tuple[bytes, list[np.ndarray]]] = field(default_factory=dict)
    hits: int = 0
    misses: int = 0

    def reset(self) -> None:
        self.instance_key = None
        self.params_token = None
        self.jobs.clear()
        self.hits = self.misses = 0


def cached_forward(features: StateFeatures, params: PolicyParameters, config: PolicyConfig,
                   cache: KVCache | None = None) -> tuple[PolicyOutput, KVCache]:
    if cache is None:
        cache = KVCache()
    if cache.instance_key is None:
        cache.instance_key = features.instance_key
    elif cache.instance_key != features.instance_key:
        raise CacheError("cache belongs to a different instance; reset it for a new episode")
    token = params.token()
    if cache.params_token != token:
        cache.jobs.clear()
        cache.params_token = token
    if not features.feasible_mask.any():
        raise PolicyError("no feasible action in this state")

    n, d = features.num_ops, config.dim
    per_layer = [np.zeros((n, d)) for _ in range(config.layers)]
    live = features.op_valid
    for j in np.unique(features.job_of):
        idx = np.flatnonzero((features.job_of == j) & live)
        if idx.size == 0:
            cache.jobs.pop(int(j), None)
            continue
        rows = features.op_features[idx]
        sig = rows.tobytes() + features.positions[idx].tobytes()
        hit = cache.jobs.get(int(j))
        if hit is not None and hit[0] == sig:
            cache.hits += 1
            outs = hit[1]
        else:
            cache.misses += 1
            k = idx.size
            mini = Batch(op_x=rows[None], mach_x=np.zeros((1, 1, 1)), edge=np.zeros((1, k, 1)),
                         op_attn=np.triu(np.ones((k, k), dtype=bool))[None],
                         positions=features.positions[idx][None].astype(np.float64),
                         o2m=np.zeros((1, k, 1), dtype=bool), feasible=np.zeros((1, k, 1), dtype=bool),
                         op_valid=np.ones((1, k), dtype=bool), mach_valid=np.ones((1, 1), dtype=bool))
            outs = [t.data[0] for t in op_branch(params, config, mini)]
            cache.jobs[int(j)] = (sig, outs)
        for layer in range(config.layers):
            per_layer[layer][idx] = outs[layer]
    batch = collate([features])
    out = head_forward(params, config, batch, [Tensor(h[None]) for h in per_layer])
    return _single_output(out, features), cache


# --------------------------------------------------------------------------- checkpoints

def checkpoint_dict(params: PolicyParameters, config: PolicyConfig, extra: dict | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": config.architecture(),
        "params": {k: {"shape": list(v.shape), "data": v.data.reshape(-1).tolist()}
                   for k, v in params.tensors.items()},
        "extra": extra or {},
    }


def params_from_checkpoint_dict(data: dict, expected: PolicyConfig | None = None):
    if not isinstance(data, dict) or data.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("not a policy checkpoint")
    if data.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {data.get('version')} != {CHECKPOINT_VERSION}")
    try:
        config = PolicyConfig.from_dict(data["architecture"])
    except (ConfigError, TypeError, KeyError) as exc:
        raise CheckpointError(f"bad architecture descriptor: {exc}") from None
    if expected is not None and expected.architecture() != config.architecture():
        raise CheckpointError(f"checkpoint architecture {config.architecture()} does not match "
                              f"the requested {expected.architecture()}")
    shapes = parameter_shapes(config)
    stored = data.get("params", {})
    if set(stored) != set(shapes):
        raise CheckpointError("checkpoint parameter names do not match the architecture")
    tensors = {}
    for name, (shape, _) in shapes.items():
        entry = stored[name]
        if tuple(entry["shape"]) != shape or len(entry["data"]) != int(np.prod(shape)):
            raise CheckpointError(f"shape mismatch for {name}: {entry['shape']} vs {list(shape)}")
        tensors[name] = Tensor(np.asarray(entry["data"], dtype=np.float64).reshape(shape), True, name)
    if expected is not None:
        config = expected
    return PolicyParameters(tensors), config


def save_checkpoint(path, params: PolicyParameters, config: PolicyConfig, extra: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_dict(params, config, extra), fh)


def load_checkpoint(path, expected: PolicyConfig | None = None):
    """Returns (params, config). Any malformed content raises ``CheckpointError``."""
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from None
    try:
        return params_from_checkpoint_dict(data, expected)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from None
