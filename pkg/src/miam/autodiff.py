"""Minimal dense-tensor engine with reverse-mode differentiation.

Tensors hold contiguous numpy arrays of up to three axes (batch/time/feature).
Every operation that sees a gradient-requiring input records its parents and a
local backward closure; the resulting DAG is the tape. ``backward`` walks it
once in reverse topological order, so each node's adjoint is complete before
it is propagated. Everything is plain single-threaded numpy, hence runs are
bitwise reproducible for identical inputs.

Setting ``DEBUG_CHECK_FINITE = True`` makes every forward op assert that its
output is finite (slow; for debugging only).
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError

DEBUG_CHECK_FINITE = False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, name: Optional[str] = None,
           dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=requires_grad, name=name)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _check_finite(out: np.ndarray, op: str):
    if DEBUG_CHECK_FINITE and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite output of {op}")


def _make(out_data, parents, backward_fn, op: str) -> Tensor:
    _check_finite(out_data, op)
    requires = any(p.requires_grad for p in parents)
    if not requires:
        return Tensor(out_data)
    return Tensor(out_data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)


def _accumulate(parent: Tensor, contribution: np.ndarray):
    if not parent.requires_grad:
        return
    if parent.grad is None:
        parent.grad = np.array(contribution, copy=True)
    else:
        parent.grad = parent.grad + contribution


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2 axes, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(out, (a, b), bw, "matmul")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose needs >=2 axes, got {a.shape}")
    out = np.swapaxes(a.data, -1, -2)

    def bw(g):
        _accumulate(a, np.swapaxes(g, -1, -2))

    return _make(out, (a,), bw, "transpose")


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add operands not broadcastable: {a.shape} + {b.shape}")

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * c

    def bw(g):
        _accumulate(a, g * c)

    return _make(out, (a,), bw, "scale")


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"elementwise_mul operands not broadcastable: {a.shape} * {b.shape}")

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), bw, "elementwise_mul")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bw(g):
        _accumulate(a, g * (a.data > 0))

    return _make(out, (a,), bw, "relu")


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    slope = float(slope)
    out = np.where(a.data > 0, a.data, slope * a.data)

    def bw(g):
        _accumulate(a, g * np.where(a.data > 0, 1.0, slope))

    return _make(out, (a,), bw, "leaky_relu")


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign to avoid overflow in exp.
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(g):
        _accumulate(a, g * out * (1.0 - out))

    return _make(out, (a,), bw, "sigmoid")


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def bw(g):
        _accumulate(a, g / a.data)

    return _make(out, (a,), bw, "log")


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for a scalar exponent."""
    exponent = float(exponent)
    out = a.data ** exponent

    def bw(g):
        _accumulate(a, g * exponent * a.data ** (exponent - 1.0))

    return _make(out, (a,), bw, "power")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient flows only through unclipped entries."""
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def bw(g):
        _accumulate(a, g * inside)

    return _make(out, (a,), bw, "clamp")


def row_softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    z = a.data - np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / np.sum(e, axis=-1, keepdims=True)

    def bw(g):
        dot = np.sum(g * p, axis=-1, keepdims=True)
        _accumulate(a, p * (g - dot))

    return _make(p, (a,), bw, "row_softmax")


def masked_row_softmax(a: Tensor, key_mask) -> Tensor:
    """Softmax over the last axis restricted to positions where key_mask is 1.

    ``key_mask`` is a constant (no gradient) broadcastable to ``a`` after
    inserting a row axis: shape (Tk,) or (B, Tk) for logits (..., Tq, Tk).
    Masked positions get exactly zero probability; a fully-masked row yields
    an all-zero output row.
    """
    m = _as_array(key_mask).astype(bool)
    if m.ndim == a.ndim - 1:
        m = np.expand_dims(m, axis=-2)
    try:
        mb = np.broadcast_to(m, a.shape)
    except ValueError:
        raise ShapeError(f"masked_row_softmax mask {m.shape} not broadcastable to logits {a.shape}")

    neg = np.where(mb, a.data, -np.inf)
    zmax = np.max(neg, axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)  # fully-masked rows
    e = np.where(mb, np.exp(neg - zmax), 0.0)
    denom = np.sum(e, axis=-1, keepdims=True)
    p = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def bw(g):
        dot = np.sum(g * p, axis=-1, keepdims=True)
        _accumulate(a, p * (g - dot))  # zero at masked positions since p == 0

    return _make(p, (a,), bw, "masked_row_softmax")


def mean_over_axis(a: Tensor, axis: int) -> Tensor:
    n = a.shape[axis]
    out = np.mean(a.data, axis=axis)

    def bw(g):
        _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.shape) / n)

    return _make(out, (a,), bw, "mean_over_axis")


def sum_over_axis(a: Tensor, axis: int) -> Tensor:
    out = np.sum(a.data, axis=axis)

    def bw(g):
        _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _make(out, (a,), bw, "sum_over_axis")


def sum_all(a: Tensor) -> Tensor:
    out = np.sum(a.data)

    def bw(g):
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(out), (a,), bw, "sum_all")


def concat_last_axis(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_last_axis needs at least one tensor")
    out = np.concatenate([p.data for p in parts], axis=-1)
    sizes = [p.shape[-1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accumulate(p, g[..., lo:hi])

    return _make(out, tuple(parts), bw, "concat_last_axis")


def split_last_axis(a: Tensor, sizes: Sequence[int]) -> list:
    if sum(sizes) != a.shape[-1]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to last axis of {a.shape}")
    outs = []
    offset = 0
    for size in sizes:
        lo, hi = offset, offset + size
        offset = hi

        def bw(g, lo=lo, hi=hi):
            full = np.zeros_like(a.data)
            full[..., lo:hi] = g
            _accumulate(a, full)

        outs.append(_make(a.data[..., lo:hi], (a,), bw, "split_last_axis"))
    return outs


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine part)."""
    mu = np.mean(a.data, axis=-1, keepdims=True)
    var = np.var(a.data, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (a.data - mu) * inv

    def bw(g):
        gm = np.mean(g, axis=-1, keepdims=True)
        gy = np.mean(g * y, axis=-1, keepdims=True)
        _accumulate(a, inv * (g - gm - y * gy))

    return _make(y, (a,), bw, "layer_norm")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(x) into ``.grad`` of every gradient-requiring node.

    The tape (the recorded DAG hanging off ``loss``) is walked exactly once in
    reverse topological order. ``loss`` must be a scalar.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    topo: list = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
