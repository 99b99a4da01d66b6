"""Dense tensors with just enough reverse-mode autodiff for the model.

Every operation that touches a tensor with ``requires_grad`` records its
parents and a backward closure on the produced tensor; ``Tensor.backward()``
replays that graph in reverse topological order. Data buffers are numpy
arrays treated as immutable once wrapped — gradient buffers are the only
mutable state. Precision follows the arrays you put in (float32 for
training, float64 wherever tests need tight tolerances).
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

from . import rng as _rng

__all__ = [
    "Tensor", "tensor", "param", "zeros", "ones", "no_grad",
    "add", "sub", "mul", "matmul", "transpose2d", "reshape", "narrow",
    "concat", "gather_rows", "tsum", "exp", "cos", "sin", "sigmoid", "silu",
    "layer_norm", "dropout", "softmax_cross_entropy", "complex_mul",
    "reset_gradients",
]

_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation paths)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate grads of every requires_grad leaf reachable from a scalar.

        Leaf gradients accumulate across calls; interior-node gradients are
        scratch space cleared at the start of each pass.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topo_order(self)
        for node in order:
            if node._backward is not None:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # Operator sugar; every function below is also callable directly.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=requires_grad)


def param(data, dtype=None) -> Tensor:
    """Trainable leaf."""
    return tensor(data, requires_grad=True, dtype=dtype)


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype))


def reset_gradients(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _topo_order(root: Tensor) -> list[Tensor]:
    # Iterative DFS postorder; recursion would overflow on long scan chains.
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _record(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED[-1] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out_data = a.data + b.data

    def backward():
        g = out.grad
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    out = _record(out_data, (a, b), backward)
    return out


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out_data = a.data - b.data

    def backward():
        g = out.grad
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    out = _record(out_data, (a, b), backward)
    return out


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out_data = a.data * b.data

    def backward():
        g = out.grad
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    out = _record(out_data, (a, b), backward)
    return out


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def backward():
        _accum(x, out.grad * out_data)

    out = _record(out_data, (x,), backward)
    return out


def cos(x: Tensor) -> Tensor:
    out_data = np.cos(x.data)

    def backward():
        _accum(x, -out.grad * np.sin(x.data))

    out = _record(out_data, (x,), backward)
    return out


def sin(x: Tensor) -> Tensor:
    out_data = np.sin(x.data)

    def backward():
        _accum(x, out.grad * np.cos(x.data))

    out = _record(out_data, (x,), backward)
    return out


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # Split by sign so exp never overflows.
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                        np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out_data = out_data.astype(d.dtype, copy=False)

    def backward():
        _accum(x, out.grad * out_data * (1.0 - out_data))

    out = _record(out_data, (x,), backward)
    return out


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    s = s.astype(d.dtype, copy=False)
    out_data = d * s

    def backward():
        _accum(x, out.grad * s * (1.0 + d * (1.0 - s)))

    out = _record(out_data, (x,), backward)
    return out


def complex_mul(a: tuple[Tensor, Tensor], b: tuple[Tensor, Tensor]):
    """Elementwise product of (real, imag) pairs; grads ride the primitives."""
    ar, ai = a
    br, bi = b
    return sub(mul(ar, br), mul(ai, bi)), add(mul(ar, bi), mul(ai, br))


# ---------------------------------------------------------------------------
# shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if b.data.ndim != 2:
        raise ValueError(f"matmul: right operand must be 2-D, got {b.shape}")
    if a.data.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(
            f"matmul: inner extents do not match: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            lhs = a.data.reshape(-1, a.shape[-1])
            _accum(b, lhs.T @ g.reshape(-1, g.shape[-1]))

    out = _record(out_data, (a, b), backward)
    return out


def transpose2d(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError(f"transpose2d: expected a matrix, got {x.shape}")
    out_data = np.ascontiguousarray(x.data.T)

    def backward():
        _accum(x, out.grad.T)

    out = _record(out_data, (x,), backward)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape
    out_data = x.data.reshape(shape)

    def backward():
        _accum(x, out.grad.reshape(old))

    out = _record(out_data, (x,), backward)
    return out


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Slice [start:stop) along one axis."""
    extent = x.data.shape[axis]
    if not (0 <= start < stop <= extent):
        raise ValueError(
            f"narrow: [{start}:{stop}) out of range for axis {axis} of {x.shape}")
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out_data = x.data[index]

    def backward():
        g = np.zeros_like(x.data)
        g[index] = out.grad
        _accum(x, g)

    out = _record(out_data, (x,), backward)
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.data.shape[axis] for t in tensors]

    def backward():
        offset = 0
        for t, extent in zip(tensors, extents):
            index = [slice(None)] * out_data.ndim
            index[axis] = slice(offset, offset + extent)
            _accum(t, out.grad[tuple(index)])
            offset += extent

    out = _record(out_data, tensors, backward)
    return out


def gather_rows(table: Tensor, ids) -> Tensor:
    """Row lookup table[ids]; gradient scatter-adds into the table."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValueError(f"gather_rows: ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"gather_rows: id out of range [0, {table.shape[0]})")
    out_data = table.data[ids]

    def backward():
        g = np.zeros_like(table.data)
        np.add.at(g, ids.reshape(-1), out.grad.reshape(-1, table.shape[-1]))
        _accum(table, g)

    out = _record(out_data, (table,), backward)
    return out


def tsum(x: Tensor) -> Tensor:
    """Full reduction to a scalar."""
    out_data = np.asarray(x.data.sum())

    def backward():
        _accum(x, np.broadcast_to(out.grad, x.data.shape).astype(x.data.dtype))

    out = _record(out_data, (x,), backward)
    return out


# ---------------------------------------------------------------------------
# fused layers


def layer_norm(x: Tensor, alpha: Tensor, beta: Tensor, eps: float,
               segments: Sequence[int] | None = None) -> Tensor:
    """Normalize the last dimension, optionally per segment.

    Without `segments`, statistics span the whole last dimension. With
    `segments` (strictly increasing chunk ends, last == d), each chunk
    [b_{j-1}:b_j) is normalized with its own mean/variance — the prefix-safe
    mode used by the nested models.
    """
    if eps <= 0:
        raise ValueError(f"layer_norm: eps must be positive, got {eps}")
    d = x.shape[-1]
    if alpha.shape != (d,) or beta.shape != (d,):
        raise ValueError(
            f"layer_norm: alpha/beta must have shape ({d},), got "
            f"{alpha.shape} / {beta.shape}")
    bounds = list(segments) if segments is not None else [d]
    if (not bounds or any(b <= a for a, b in zip([0] + bounds, bounds))
            or bounds[-1] != d):
        raise ValueError(
            f"layer_norm: segments must be strictly increasing and end at "
            f"{d}, got {bounds}")
    starts = [0] + bounds[:-1]

    xhat = np.empty_like(x.data)
    istds = []
    for s, e in zip(starts, bounds):
        seg = x.data[..., s:e]
        mu = seg.mean(axis=-1, keepdims=True)
        var = seg.var(axis=-1, keepdims=True)
        istd = 1.0 / np.sqrt(var + eps)
        xhat[..., s:e] = (seg - mu) * istd
        istds.append(istd)
    out_data = alpha.data * xhat + beta.data

    def backward():
        g = out.grad
        if alpha.requires_grad:
            _accum(alpha, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * alpha.data
            gx = np.empty_like(x.data)
            for (s, e), istd in zip(zip(starts, bounds), istds):
                n = e - s
                ghs = gh[..., s:e]
                xh = xhat[..., s:e]
                gx[..., s:e] = (istd / n) * (
                    n * ghs
                    - ghs.sum(axis=-1, keepdims=True)
                    - xh * (ghs * xh).sum(axis=-1, keepdims=True))
            _accum(x, gx)

    out = _record(out_data, (x, alpha, beta), backward)
    return out


def dropout(x: Tensor, rate: float, training: bool, key) -> Tensor:
    """Zero entries with probability `rate`, scale survivors by 1/(1-rate).

    The mask comes from a counter-based generator keyed by `key` (an int or a
    (seed, site, step) tuple), so a fixed key replays a fixed mask. Identity
    when not training.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    gen = _rng.generator_from_key(key)
    keep = gen.random(x.shape) >= rate
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.data.dtype)
    mask = keep.astype(x.data.dtype) * scale
    out_data = x.data * mask

    def backward():
        _accum(x, out.grad * mask)

    out = _record(out_data, (x,), backward)
    return out


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of -log softmax(logits)[label], max-shifted for stability."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ValueError(
            f"softmax_cross_entropy: logits must be [batch, classes], got "
            f"{logits.shape}")
    n, v = logits.shape
    if labels.shape != (n,) or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(
            f"softmax_cross_entropy: labels must be {n} integers")
    if labels.size and (labels.min() < 0 or labels.max() >= v):
        raise IndexError(
            f"softmax_cross_entropy: label out of range [0, {v})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.arange(n)
    out_data = np.asarray(-logp[rows, labels].mean(), dtype=logits.data.dtype)

    def backward():
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        _accum(logits, p * (out.grad / n))

    out = _record(out_data, (logits,), backward)
    return out
