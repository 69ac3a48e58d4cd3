"""Dense tensors and a tape-based reverse-mode differentiator.

Operations only record onto a :class:`Tape` while one is active (``with
Tape() as tape:``); outside a tape every op is a plain numpy computation,
which keeps inference cheap.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .. import _kernels

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when an autodiff precondition is violated."""


class Tensor:
    """An immutable array value, optionally a differentiable leaf."""

    __slots__ = ("data", "requires_grad", "grad", "_tracked", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=DTYPE):
        arr = np.array(data, dtype=dtype, copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tracked = self.requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray, tracked: bool) -> "Tensor":
        t = cls.__new__(cls)
        if not isinstance(arr, np.ndarray):  # numpy scalar from a full reduction
            arr = np.array(arr, dtype=DTYPE)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._tracked = tracked
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# the computation record


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence]


@dataclass
class Tape:
    """Ordered record of executed primitives (a topological order by construction)."""

    nodes: list = field(default_factory=list)
    _token: object = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)
        self._token = None
        return False

    def leaves(self) -> list:
        seen = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in seen:
                    seen[id(t)] = t
        return list(seen.values())

    def backward(self, loss: Tensor) -> dict:
        return backward(loss, self)


_ACTIVE: contextvars.ContextVar = contextvars.ContextVar("camfusion_tape", default=None)


def _record(op, inputs, out_arr, backward_fn) -> Tensor:
    tape = _ACTIVE.get()
    tracked = tape is not None and any(t._tracked for t in inputs)
    out = Tensor._wrap(out_arr, tracked)
    if tracked:
        tape.nodes.append(Node(op, tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor, record: Tape) -> dict:
    """Populate ``.grad`` on every requires-grad leaf in ``record``.

    Grads are overwritten, not accumulated, so repeated calls are
    idempotent. Returns ``{leaf: grad}``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not any(node.output is loss for node in record.nodes):
        raise ContractError("loss was not produced on this record")

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(record.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t._tracked:
                continue
            prev = grads.get(id(t))
            grads[id(t)] = gi if prev is None else prev + gi

    result = {}
    for leaf in record.leaves():
        g = grads.get(id(leaf))
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g).reshape(leaf.shape)
        result[leaf] = leaf.grad
    return result


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _record("div", (a, b), out,
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (both operands ≥ 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def grad(g):
        da = np.matmul(g, np.swapaxes(bd, -1, -2))
        if bd.ndim == 2 and ad.ndim > 2:
            # shared weight: one GEMM over the flattened batch instead of a stack then a sum
            db = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            db = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return _unbroadcast(da, ad.shape), db

    return _record("matmul", (a, b), out, grad)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        # contiguous 1-D reduction -> numpy pairwise summation
        out = np.sum(np.ascontiguousarray(a.data).reshape(-1))
        out = np.asarray(out).reshape((1,) * a.ndim if keepdims else ())
    else:
        out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g.reshape(g.shape) if g.ndim else g, shape).copy(),)

    return _record("sum", (a,), np.asarray(out, dtype=a.data.dtype), grad)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _record("reshape", (a,), out, lambda g: (g.reshape(old),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _record("swapaxes", (a,), np.swapaxes(a.data, ax1, ax2),
                   lambda g: (np.swapaxes(g, ax1, ax2),))


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis`` (indices may repeat)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.shape

    def grad(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(np.moveaxis(out, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (out,)

    return _record("take", (a,), np.take(a.data, idx, axis=axis), grad)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record("log", (a,), np.log(ad), lambda g: (g / ad,))


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Max-subtracted softmax; ``mask`` (bool, True = keep) zeroes excluded entries."""
    x = as_tensor(x)
    xd = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        if not mask.any(axis=axis).all():
            raise ShapeError("softmax: a row has every entry masked out")
        xd = np.where(mask, xd, -np.inf)
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("softmax", (x,), out, grad)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs last axis {n}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    x2d = np.ascontiguousarray(x.data.reshape(-1, n))
    gd, bd = gain.data, bias.data
    out, xhat, inv_std = _kernels.layer_norm_forward(x2d, gd, bd, float(eps))
    shape = x.shape

    def grad(g):
        dx, dgain, dbias = _kernels.layer_norm_backward(
            np.ascontiguousarray(g.reshape(-1, n)), xhat, inv_std, gd)
        return dx.reshape(shape), dgain, dbias

    return _record("layer_norm", (x, gain, bias), out.reshape(shape), grad)


def gelu(x) -> Tensor:
    """Exact GELU, x·Φ(x) with Φ from erf."""
    x = as_tensor(x)
    xd = np.ascontiguousarray(x.data)
    return _record("gelu", (x,), _kernels.gelu_forward(xd),
                   lambda g: (_kernels.gelu_backward(xd, np.ascontiguousarray(g)),))


def _softplus(v):
    return np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))


def _sigmoid(v):
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    """Stable logistic function on plain arrays."""
    return _sigmoid(np.asarray(x, dtype=DTYPE))


def log_sigmoid(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record("log_sigmoid", (x,), -_softplus(-xd), lambda g: (g * _sigmoid(-xd),))


def l2_normalize(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    out = xd / norm

    def grad(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _record("l2_normalize", (x,), out, grad)
