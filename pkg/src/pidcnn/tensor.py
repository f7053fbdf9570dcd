"""Small reverse-mode autodiff core backed by numpy.

Plain ``numpy.ndarray`` plays the role of the dense tensor. ``Value`` wraps an
array and records the operation that produced it; every new ``Value`` takes
the next number from a global counter, so sorting reachable nodes by that
number in reverse replays the tape backwards.

Only the operations the network needs are provided. Binary operations require
exact shape agreement; there is no broadcasting.
"""

from __future__ import annotations

import itertools
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_tape_counter = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class Value:
    """An array that takes part in the gradient graph."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "tape_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 parents: tuple["Value", ...] = (), backward_fn: Callable | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim and min(arr.shape) < 1:
            raise ShapeError(f"extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.parents = parents
        self.backward_fn = backward_fn
        self.tape_id = next(_tape_counter)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Value{label}(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self, params: "ParameterStore | None" = None) -> None:
        backward(self, params)


def _lift(x, like: Value) -> Value:
    if isinstance(x, Value):
        return x
    return Value(np.broadcast_to(np.asarray(x, dtype=like.dtype), like.shape).copy())


def constant(data, dtype=None) -> Value:
    arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
    return Value(arr)


def _node(data, parents: tuple[Value, ...], backward_fn) -> Value:
    return Value(data, parents=parents, backward_fn=backward_fn)


def _check_same(a: Value, b: Value, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise plumbing


def add(a: Value, b: Value) -> Value:
    _check_same(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Value, b: Value) -> Value:
    _check_same(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Value, b: Value) -> Value:
    _check_same(a, b, "mul")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Value, factor: float) -> Value:
    return _node(a.data * factor, (a,), lambda g: (g * factor,))


def total(a: Value) -> Value:
    """Sum of all elements, as a 0-d value."""
    return _node(a.data.sum(), (a,), lambda g: (np.full(a.shape, g, dtype=a.dtype),))


def reshape(a: Value, shape: Sequence[int]) -> Value:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def time_slice(x: Value, t: int) -> Value:
    """Pick index ``t`` on axis 2 (time) of a 5-d value, dropping that axis."""
    if x.data.ndim != 5:
        raise ShapeError(f"time_slice expects 5 axes, got {x.shape}")

    def back(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, :, t] = g
        return (full,)

    return _node(np.ascontiguousarray(x.data[:, :, t]), (x,), back)


def concat(values: Sequence[Value], axis: int = 1) -> Value:
    """Join values along ``axis``; every other extent must agree."""
    if not values:
        raise ShapeError("concat needs at least one operand")
    ref = values[0].shape
    for v in values[1:]:
        if len(v.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(v.shape, ref)) if i != axis
        ):
            raise ShapeError(f"concat on axis {axis}: {v.shape} does not match {ref}")
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])

    def back(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            out.append(g[tuple(index)])
        return tuple(out)

    return _node(np.concatenate([v.data for v in values], axis=axis), tuple(values), back)


def concat_channels(a: Value, b: Value) -> Value:
    """Channels of ``a`` first, then channels of ``b``."""
    return concat([a, b], axis=1)


# ---------------------------------------------------------------------------
# network layers


def _fold_time(x: np.ndarray) -> np.ndarray:
    n, c, t, h, w = x.shape
    return x.transpose(0, 2, 1, 3, 4).reshape(n * t, c, h, w)


def _unfold_time(x: np.ndarray, n: int, t: int) -> np.ndarray:
    b, c, h, w = x.shape
    return np.ascontiguousarray(x.reshape(n, t, c, h, w).transpose(0, 2, 1, 3, 4))


def _im2col(x: np.ndarray) -> np.ndarray:
    # (B, C, H, W) -> (B, C*9, H*W); zero padding 1 on both spatial axes
    b, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((b, c, 3, 3, h, w), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, :, dy, dx] = padded[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(b, c * 9, h * w)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    b, c, h, w = shape
    cols = cols.reshape(b, c, 3, 3, h, w)
    padded = np.zeros((b, c, h + 2, w + 2), dtype=cols.dtype)
    for dy in range(3):
        for dx in range(3):
            padded[:, :, dy:dy + h, dx:dx + w] += cols[:, :, dy, dx]
    return padded[:, :, 1:-1, 1:-1]


def conv_ct33(x: Value, weight: Value, bias: Value) -> Value:
    """Convolution with a (1, 3, 3) kernel over (time, height, width).

    Channels are mixed fully, time is untouched, the spatial axes use zero
    padding 1 and stride 1 so H and W are preserved.
    """
    if x.data.ndim != 5:
        raise ShapeError(f"conv_ct33: input must be [N,C,T,H,W], got {x.shape}")
    n, cin, t, h, w = x.shape
    if weight.data.ndim != 5 or weight.shape[1:] != (cin, 1, 3, 3):
        raise ShapeError(
            f"conv_ct33: weight {weight.shape} incompatible with input channels {cin}; "
            f"expected (Cout, {cin}, 1, 3, 3)"
        )
    cout = weight.shape[0]
    if bias.shape != (cout,):
        raise ShapeError(f"conv_ct33: bias {bias.shape} does not match Cout={cout}")

    folded = _fold_time(x.data)
    cols = _im2col(folded)
    w2 = weight.data.reshape(cout, cin * 9)
    out = np.matmul(w2, cols) + bias.data[None, :, None]
    out = _unfold_time(out.reshape(n * t, cout, h, w), n, t)

    def back(g):
        g2 = _fold_time(g).reshape(n * t, cout, h * w)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gb = g2.sum(axis=(0, 2))
        gcols = np.matmul(w2.T, g2)
        gx = _unfold_time(_col2im(gcols, folded.shape), n, t)
        return gx, gw, gb

    return _node(out, (x, weight, bias), back)


@dataclass
class RunningStats:
    """Per-channel running mean/variance used by batch norm in eval mode."""

    mean: np.ndarray | None = None
    var: np.ndarray | None = None

    @classmethod
    def initial(cls, channels: int, dtype=DEFAULT_DTYPE) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _per_channel(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batch_norm(x: Value, gamma: Value, beta: Value, running: RunningStats,
               train: bool = True, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Value:
    """Per-channel normalization over every axis except axis 1."""
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma {gamma.shape}/beta {beta.shape} vs {c} channels")
    axes = (0,) + tuple(range(2, x.data.ndim))
    count = x.data.size // c
    nd = x.data.ndim
    g_ = _per_channel(gamma.data, nd)

    if train:
        if count < 2:
            raise ShapeError("batch_norm: train mode needs at least 2 values per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - _per_channel(mean, nd)) * _per_channel(inv_std, nd)
        unbiased = var * (count / (count - 1))
        if running.mean is None:
            running.mean = mean.astype(x.dtype)
            running.var = unbiased.astype(x.dtype)
        else:
            running.mean = (momentum * running.mean + (1.0 - momentum) * mean).astype(running.mean.dtype)
            running.var = (momentum * running.var + (1.0 - momentum) * unbiased).astype(running.var.dtype)

        def back(g):
            dxhat = g * g_
            s1 = dxhat.sum(axis=axes)
            s2 = (dxhat * xhat).sum(axis=axes)
            gx = (_per_channel(inv_std, nd) / count) * (
                count * dxhat - _per_channel(s1, nd) - xhat * _per_channel(s2, nd)
            )
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        if running.mean is None or running.var is None:
            raise RuntimeError(
                "batch_norm: eval mode has no running statistics; initialize them "
                "explicitly with RunningStats.initial(channels) (mean 0, var 1)"
            )
        inv_std = 1.0 / np.sqrt(running.var + eps)
        xhat = (x.data - _per_channel(running.mean, nd)) * _per_channel(inv_std, nd)

        def back(g):
            gx = g * g_ * _per_channel(inv_std, nd)
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = xhat * g_ + _per_channel(beta.data, nd)
    return _node(out.astype(x.dtype, copy=False), (x, gamma, beta), back)


def prelu(x: Value, alpha: Value) -> Value:
    """x where x >= 0, alpha[c] * x elsewhere; channel axis is 1."""
    if x.data.ndim < 2 or alpha.shape != (x.shape[1],):
        raise ShapeError(f"prelu: alpha {alpha.shape} needs one entry per channel of {x.shape}")
    nd = x.data.ndim
    a = _per_channel(alpha.data, nd)
    neg = x.data < 0
    axes = (0,) + tuple(range(2, nd))

    def back(g):
        gx = np.where(neg, g * a, g)
        ga = np.where(neg, g * x.data, 0).sum(axis=axes)
        return gx, ga.astype(alpha.dtype)

    return _node(np.where(neg, x.data * a, x.data), (x, alpha), back)


def prelu_inverse(y: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Analytic inverse of prelu for positive alpha."""
    a = _per_channel(np.asarray(alpha), y.ndim)
    return np.where(y < 0, y / a, y)


def relu(x: Value) -> Value:
    pos = x.data > 0
    return _node(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (np.where(pos, g, 0),))


def _check_even(x: Value, op: str) -> None:
    if x.data.ndim != 5:
        raise ShapeError(f"{op}: input must be [N,C,T,H,W], got {x.shape}")
    if x.shape[3] % 2 or x.shape[4] % 2:
        raise ShapeError(f"{op}: H and W must be even, got {x.shape[3]}x{x.shape[4]}")


def avg_pool2(x: Value) -> Value:
    """Mean of each non-overlapping 2x2 spatial window."""
    _check_even(x, "avg_pool2")
    n, c, t, h, w = x.shape
    out = x.data.reshape(n, c, t, h // 2, 2, w // 2, 2).mean(axis=(4, 6))

    def back(g):
        g4 = (g * 0.25)[:, :, :, :, None, :, None]
        return (np.broadcast_to(g4, (n, c, t, h // 2, 2, w // 2, 2)).reshape(x.shape),)

    return _node(out.astype(x.dtype, copy=False), (x,), back)


def max_pool2(x: Value) -> Value:
    """Max of each 2x2 window; ties go to the first element in row-major order."""
    _check_even(x, "max_pool2")
    n, c, t, h, w = x.shape
    win = x.data.reshape(n, c, t, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 3, 5, 4, 6)
    win = win.reshape(n, c, t, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape(n, c, t, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 3, 5, 4, 6)
        return (gw.reshape(x.shape),)

    return _node(out, (x,), back)


def fully_connected(x: Value, weight: Value, bias: Value) -> Value:
    """``x @ weight + bias`` for x [N, D], weight [D, K], bias [K]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"fully_connected: {x.shape} @ {weight.shape} is undefined")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"fully_connected: bias {bias.shape} vs output width {weight.shape[1]}")

    def back(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return _node(x.data @ weight.data + bias.data, (x, weight, bias), back)


def mse_loss(pred: Value, target: np.ndarray) -> Value:
    """Mean squared difference over all elements."""
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target
    k = diff.size

    def back(g):
        return (g * (2.0 / k) * diff,)

    return _node(np.mean(diff * diff), (pred,), back)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Value, params: "ParameterStore | None" = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    If ``params`` is given, parameters the loss does not reach get a zero
    gradient so the optimizer always sees a full set.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")

    nodes: dict[int, Value] = {}
    stack = [loss]
    while stack:
        v = stack.pop()
        if v.tape_id in nodes or not v.requires_grad:
            continue
        nodes[v.tape_id] = v
        stack.extend(v.parents)

    grads: dict[int, np.ndarray] = {loss.tape_id: np.ones_like(loss.data)}
    for tid in sorted(nodes, reverse=True):
        v = nodes[tid]
        g = grads.pop(tid, None)
        if g is None:
            continue
        if v.backward_fn is None:
            v.grad = g.astype(v.dtype) if v.grad is None else v.grad + g
            continue
        for parent, pg in zip(v.parents, v.backward_fn(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
            prev = grads.get(parent.tape_id)
            grads[parent.tape_id] = pg if prev is None else prev + pg

    if params is not None:
        for p in params.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# parameters and optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError(f"Adam betas must lie in (0, 1): {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise ValueError(f"Adam epsilon must be positive: {self.eps}")


@dataclass
class ParameterStore:
    """Ordered trainable parameters, non-trainable buffers and Adam moments."""

    params: "OrderedDict[str, Value]" = field(default_factory=OrderedDict)
    buffers: "OrderedDict[str, RunningStats]" = field(default_factory=OrderedDict)
    adam: dict[str, AdamState] = field(default_factory=dict)

    def add(self, name: str, data: np.ndarray) -> Value:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        v = Value(data, requires_grad=True, name=name)
        self.params[name] = v
        return v

    def __getitem__(self, name: str) -> Value:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def values(self) -> Iterable[Value]:
        return self.params.values()

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype=None) -> "ParameterStore":
        """Deep copy with parameters and buffers cast (Adam state dropped)."""

        def conv(a):
            return None if a is None else (a.copy() if dtype is None else a.astype(dtype))

        out = ParameterStore()
        for name, p in self.params.items():
            out.add(name, conv(p.data))
        for name, rs in self.buffers.items():
            out.buffers[name] = RunningStats(conv(rs.mean), conv(rs.var))
        return out

    def copy(self) -> "ParameterStore":
        out = self.astype()
        out.adam = {k: AdamState(s.m.copy(), s.v.copy(), s.step) for k, s in self.adam.items()}
        return out


def adam_step(store: ParameterStore, cfg: AdamConfig) -> None:
    """One bias-corrected Adam update of every parameter; clears gradients."""
    for name, p in store.items():
        if p.grad is None:
            raise RuntimeError(f"adam_step: parameter {name!r} has no gradient")
    lr, b1, b2, eps = cfg.lr, cfg.beta1, cfg.beta2, cfg.eps
    for name, p in store.items():
        st = store.adam.get(name)
        if st is None:
            st = store.adam[name] = AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
        g = p.grad
        st.step += 1
        st.m = b1 * st.m + (1.0 - b1) * g
        st.v = b2 * st.v + (1.0 - b2) * (g * g)
        m_hat = st.m / (1.0 - b1 ** st.step)
        v_hat = st.v / (1.0 - b2 ** st.step)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
        p.grad = None
