"""Small dense-tensor core with tape-based reverse-mode differentiation.

Operations only record themselves while a :class:`Tape` is active and at
least one input is tracked, so inference never builds a graph::

    with Tape() as tape:
        loss = (x @ w).sum()
    grads = backward(tape, loss)      # {tensor: ndarray}

Everything is float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class TrainingError(RuntimeError):
    """Non-finite numbers where training needs finite ones."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)
    def transpose(self, *axes): return transpose(self, axes if axes else None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------- tape

_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications; order is topological by construction."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._produced: set[int] = set()

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self.nodes)


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _result(data, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append((out, parents, backward_fn))
        tape._produced.add(id(out))
    return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` for every tracked leaf it depends on."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad and id(loss) not in tape._produced:
        leaves[id(loss)] = loss
    for out, parents, fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for p, pg in zip(parents, fn(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if key not in tape._produced:
                leaves[key] = p
    return {t: grads[k] for k, t in leaves.items() if k in grads}


def gradients(tape: Tape, loss: Tensor, params) -> list[np.ndarray]:
    """Like :func:`backward` but aligned with ``params`` (zeros where unreached)."""
    g = backward(tape, loss)
    return [g.get(p, np.zeros_like(p.data)) for p in params]


# --------------------------------------------------------------------------- helpers

def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# --------------------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "maximum")
    pick_a = a.data >= b.data
    sa, sb = a.shape, b.shape
    return _result(np.where(pick_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "minimum")
    pick_a = a.data <= b.data
    sa, sb = a.shape, b.shape
    return _result(np.where(pick_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def where(cond, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return _result(np.where(cond, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa),
                              _unbroadcast(np.where(cond, 0.0, g), sb)))


# --------------------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} to {shape}") from None
    return _result(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _result(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def concat(tensors, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _result(out, ts, lambda g: tuple(np.split(g, sizes, axis=axis)))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def fn(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], (a,), fn)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


# --------------------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape
    return _result(ad @ bd, (a, b),
                   lambda g: (_unbroadcast(g @ np.swapaxes(bd, -1, -2), sa),
                              _unbroadcast(np.swapaxes(ad, -1, -2) @ g, sb)))


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is (in, out)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents = (x, w, b)

    def fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(out, parents, fn)


# --------------------------------------------------------------------------- normalisation

def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Softmax with an optional boolean mask (True = keep).

    Masked entries get exactly 0. A row with nothing kept comes back as all
    zeros.
    """
    x = as_tensor(x)
    y = _softmax_np(x.data, axis, mask)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), fn)


def _softmax_np(xd, axis, mask):
    if mask is None:
        z = xd - xd.max(axis=axis, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=axis, keepdims=True)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
    z = np.where(mask, xd, -np.inf)
    zmax = z.max(axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.where(mask, np.exp(np.where(mask, xd, 0.0) - zmax), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    return np.divide(e, s, out=np.zeros_like(e), where=s > 0)


def log_softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Log of :func:`softmax`; masked entries are reported as 0 (not -inf)."""
    x = as_tensor(x)
    xd = x.data
    if mask is None:
        mask_b = np.ones(xd.shape, dtype=bool)
    else:
        mask_b = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
    z = np.where(mask_b, xd, -np.inf)
    zmax = z.max(axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    shifted = np.where(mask_b, xd - zmax, 0.0)
    e = np.where(mask_b, np.exp(shifted), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    logs = np.log(np.where(s > 0, s, 1.0))
    out = np.where(mask_b, shifted - logs, 0.0)
    y = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def fn(g):
        gm = np.where(mask_b, g, 0.0)
        return (np.where(mask_b, gm - y * gm.sum(axis=axis, keepdims=True), 0.0),)

    return _result(out, (x,), fn)


def layer_norm(x, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    x = as_tensor(x)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    parents = [x]
    gd = None
    if gain is not None:
        gain = as_tensor(gain)
        gd = gain.data
        out = out * gd
        parents.append(gain)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)
    d = xd.shape[-1]

    def fn(g):
        gh = g * gd if gd is not None else g
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        res = [gx]
        if gain is not None:
            res.append((g * xhat).reshape(-1, d).sum(axis=0))
        if bias is not None:
            res.append(g.reshape(-1, d).sum(axis=0))
        return tuple(res)

    return _result(out, tuple(parents), fn)


def rope(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate channel pairs (2k, 2k+1) of the last axis by the given angles.

    ``cos``/``sin`` broadcast against ``x[..., ::2]``.
    """
    x = as_tensor(x)
    if x.shape[-1] % 2:
        raise ShapeError("rope needs an even last dimension")
    xd = x.data
    x0, x1 = xd[..., 0::2], xd[..., 1::2]
    out = np.empty(np.broadcast_shapes(xd.shape, cos.shape[:-1] + (xd.shape[-1],)))
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    shape = xd.shape

    def fn(g):
        g0, g1 = g[..., 0::2], g[..., 1::2]
        gx = np.empty(g.shape)
        gx[..., 0::2] = g0 * cos + g1 * sin
        gx[..., 1::2] = -g0 * sin + g1 * cos
        return (_unbroadcast(gx, shape),)

    return _result(out, (x,), fn)


# --------------------------------------------------------------------------- optimiser

@dataclass
class OptimizerState:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **kw) -> "OptimizerState":
        st = cls(**kw)
        st.m = [np.zeros_like(p.data) for p in params]
        st.v = [np.zeros_like(p.data) for p in params]
        return st

    def to_dict(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "step": self.step, "m": [a.tolist() for a in self.m], "v": [a.tolist() for a in self.v]}

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerState":
        return cls(lr=d["lr"], beta1=d["beta1"], beta2=d["beta2"], eps=d["eps"], step=d["step"],
                   m=[np.asarray(a, dtype=np.float64) for a in d["m"]],
                   v=[np.asarray(a, dtype=np.float64) for a in d["v"]])


def adam_step(params, grads, state: OptimizerState, max_grad_norm: float | None = None):
    """Bias-corrected Adam update, in place. Non-finite gradients raise."""
    if len(params) != len(grads) or len(state.m) != len(params):
        raise ShapeError("params, grads and optimizer moments must align")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {p.name or 'parameter'}")
    if max_grad_norm is not None:
        total = np.sqrt(sum(float((g * g).sum()) for g in grads))
        if total > max_grad_norm:
            grads = [g * (max_grad_norm / total) for g in grads]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        p.data = p.data - state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
    return params


# --------------------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: list[float]
    directional: list[float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def finite_diff_check(fn, params, tolerance: float = 1e-4, h: float = 1e-5,
                      max_coords: int | None = None, directions: int = 0,
                      rng: np.random.Generator | None = None, abs_floor: float = 1e-7) -> GradCheckReport:
    """Compare tape gradients of ``fn()`` with central differences.

    ``fn`` takes no arguments and reads the current ``.data`` of ``params``.
    The error for each parameter tensor is ``max|analytic - numeric|`` over the
    checked coordinates divided by the larger of the two gradients' max
    magnitudes; that denominator is floored at 1e-6 of the largest gradient
    entry overall and at ``abs_floor`` so exactly-zero gradients do not turn
    roundoff (about 1e-11 at h = 1e-5) into failures. ``max_coords`` samples coordinates per tensor; ``directions``
    adds whole-vector directional-derivative checks along random unit vectors.
    """
    rng = rng or np.random.default_rng(0)
    with Tape() as tape:
        loss = fn()
    analytic = gradients(tape, loss, params)
    scale = max((float(np.abs(g).max()) for g in analytic if g.size), default=0.0)
    floor = max(1e-6 * scale, abs_floor)

    def value():
        return float(fn().data.reshape(-1)[0])

    per_param = []
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        num = np.empty(len(coords))
        for k, c in enumerate(coords):
            old = flat[c]
            flat[c] = old + h
            p.data = flat.reshape(p.shape)
            up = value()
            flat[c] = old - h
            p.data = flat.reshape(p.shape)
            down = value()
            flat[c] = old
            p.data = flat.reshape(p.shape)
            num[k] = (up - down) / (2 * h)
        ana = g.reshape(-1)[coords]
        denom = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0), floor)
        per_param.append(float(np.abs(ana - num).max(initial=0.0) / denom))

    directional = []
    for _ in range(directions):
        vs = [rng.standard_normal(p.shape) for p in params]
        norm = np.sqrt(sum(float((v * v).sum()) for v in vs))
        vs = [v / norm for v in vs]
        base = [p.data.copy() for p in params]
        for p, b, v in zip(params, base, vs):
            p.data = b + h * v
        up = value()
        for p, b, v in zip(params, base, vs):
            p.data = b - h * v
        down = value()
        for p, b in zip(params, base):
            p.data = b
        num = (up - down) / (2 * h)
        ana = sum(float((g * v).sum()) for g, v in zip(analytic, vs))
        directional.append(abs(ana - num) / max(abs(ana), abs(num), floor))

    worst = max(per_param + directional, default=0.0)
    return GradCheckReport(worst, per_param, directional, tolerance)
