"""Minimal n-dimensional tensor engine with reverse-mode differentiation.

The op set is deliberately closed: it contains exactly the primitives the
network and its losses need (matmul, elementwise arithmetic, reshape/permute,
concat/split, softmax, layer norm, GELU/sigmoid/tanh, log, reductions, roll,
and an integer-index gather for relative-position-bias lookup). Values are
numpy arrays; gradients are accumulated during a single-threaded topological
backward pass.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

# Global switches. `_grad_enabled` suppresses graph construction (used by the
# samplers and by finite-difference oracles). `_matmul_multiplies` counts
# scalar multiplications performed by matmul, for complexity assertions.
_grad_enabled: bool = True
_matmul_multiplies: int = 0


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def reset_multiply_count() -> None:
    global _matmul_multiplies
    _matmul_multiplies = 0


def multiply_count() -> int:
    return _matmul_multiplies


class ShapeError(ValueError):
    """Raised when operand shapes are invalid for a primitive."""


class DiffTensor:
    """n-d array with an optional reverse-mode gradient record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    # Make ndarray <op> DiffTensor defer to our reflected operators instead
    # of numpy broadcasting over the object.
    __array_ufunc__ = None

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple = (),
        backward: Callable | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64 if np.asarray(data).dtype.kind != "f" else None)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"DiffTensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; constants are wrapped as non-grad tensors.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def item(self) -> float:
        return float(self.data)


def as_tensor(x) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    return DiffTensor(np.asarray(x, dtype=np.float64))


def parameter(data) -> DiffTensor:
    return DiffTensor(np.asarray(data), requires_grad=True)


def _needs_graph(*tensors: DiffTensor) -> bool:
    if not _grad_enabled:
        return False
    return any(t.requires_grad or t._parents for t in tensors)


def _make(data, parents, backward, track) -> DiffTensor:
    if track:
        return DiffTensor(data, requires_grad=False, parents=parents, backward=backward)
    return DiffTensor(data)


def _accum(t: DiffTensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from exc
    track = _needs_graph(a, b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), backward, track)


def mul(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from exc
    track = _needs_graph(a, b)

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), backward, track)


def div(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data / b.data
    except ValueError as exc:
        raise ShapeError(f"div: incompatible shapes {a.shape} and {b.shape}") from exc
    track = _needs_graph(a, b)

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, (a, b), backward, track)


# ---------------------------------------------------------------------------
# matmul


def matmul(a, b) -> DiffTensor:
    """Batched matrix multiply.

    Supports (..., n, k) @ (k, m) and (..., n, k) @ (..., k, m) with equal
    batch dims. Multiplication counts feed the complexity assertions.
    """
    global _matmul_multiplies
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    _matmul_multiplies += out.size * a.shape[-1]
    track = _needs_graph(a, b)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _unbroadcast(ga, a.shape))
        _accum(b, _unbroadcast(gb, b.shape))

    return _make(out, (a, b), backward, track)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape) -> DiffTensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from exc
    track = _needs_graph(a)

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _make(out, (a,), backward, track)


def permute(a, axes) -> DiffTensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for rank {a.data.ndim}")
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)
    track = _needs_graph(a)

    def backward(g):
        _accum(a, np.transpose(g, inv))

    return _make(out, (a,), backward, track)


def roll(a, shifts, axes) -> DiffTensor:
    a = as_tensor(a)
    shifts = tuple(shifts)
    axes = tuple(axes)
    out = np.roll(a.data, shifts, axis=axes)
    track = _needs_graph(a)

    def backward(g):
        _accum(a, np.roll(g, tuple(-s for s in shifts), axis=axes))

    return _make(out, (a,), backward, track)


def concat(tensors: Sequence, axis: int) -> DiffTensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from exc
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)
    track = _needs_graph(*ts)

    def backward(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _make(out, tuple(ts), backward, track)


def split(a, sizes: Sequence[int], axis: int) -> list[DiffTensor]:
    a = as_tensor(a)
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split: sizes {sizes} do not sum to axis extent {a.shape[axis]}")
    offsets = np.cumsum([0] + list(sizes))
    track = _needs_graph(a)
    parts = []
    for lo, hi in zip(offsets[:-1], offsets[1:]):
        idx = [slice(None)] * a.data.ndim
        idx[axis] = slice(int(lo), int(hi))
        idx = tuple(idx)
        piece = a.data[idx]

        def backward(g, idx=idx):
            full = np.zeros_like(a.data)
            full[idx] = g
            _accum(a, full)

        parts.append(_make(piece, (a,), backward, track))
    return parts


def gather_rows(table, index: np.ndarray) -> DiffTensor:
    """table[index] where index is an integer array; rows of `table` are
    selected and arranged with index's shape (used for position-bias lookup)."""
    table = as_tensor(table)
    index = np.asarray(index)
    if index.dtype.kind not in "iu":
        raise ShapeError("gather_rows: index must be integer typed")
    out = table.data[index]
    track = _needs_graph(table)

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index, g)
        _accum(table, gt)

    return _make(out, (table,), backward, track)


# ---------------------------------------------------------------------------
# nonlinearities and normalization

_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> DiffTensor:
    """tanh-approximation GELU, coefficient 0.044715."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)
    track = _needs_graph(a)

    def backward(g):
        sech2 = 1.0 - th * th
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        _accum(a, g * (0.5 * (1.0 + th) + 0.5 * x * sech2 * d_inner))

    return _make(out, (a,), backward, track)


def sigmoid(a) -> DiffTensor:
    a = as_tensor(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    track = _needs_graph(a)

    def backward(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, (a,), backward, track)


def tanh(a) -> DiffTensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    track = _needs_graph(a)

    def backward(g):
        _accum(a, g * (1.0 - out * out))

    return _make(out, (a,), backward, track)


def silu(a) -> DiffTensor:
    return mul(a, sigmoid(a))


def clamp(a, lo: float, hi: float) -> DiffTensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    track = _needs_graph(a)

    def backward(g):
        _accum(a, g * ((a.data >= lo) & (a.data <= hi)))

    return _make(out, (a,), backward, track)


def log(a) -> DiffTensor:
    a = as_tensor(a)
    out = np.log(a.data)
    track = _needs_graph(a)

    def backward(g):
        _accum(a, g / a.data)

    return _make(out, (a,), backward, track)


def softmax(a) -> DiffTensor:
    """Softmax over the last axis, computed with max subtraction."""
    a = as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    track = _needs_graph(a)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        _accum(a, out * (g - dot))

    return _make(out, (a,), backward, track)


def layer_norm(a, gain=None, bias=None, eps: float = 1e-5) -> DiffTensor:
    """Layer norm over the last axis with optional learnable scale/shift."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    n = x.shape[-1]
    g_t = as_tensor(gain) if gain is not None else None
    b_t = as_tensor(bias) if bias is not None else None
    out = xn
    if g_t is not None:
        out = out * g_t.data
    if b_t is not None:
        out = out + b_t.data
    parents = (a,) + tuple(t for t in (g_t, b_t) if t is not None)
    track = _needs_graph(*parents)

    def backward(g):
        gy = g * g_t.data if g_t is not None else g
        # standard layer-norm backward over the last axis
        gx = inv / n * (n * gy - gy.sum(axis=-1, keepdims=True) - xn * (gy * xn).sum(axis=-1, keepdims=True))
        _accum(a, gx)
        if g_t is not None:
            _accum(g_t, _unbroadcast(g * xn, g_t.shape))
        if b_t is not None:
            _accum(b_t, _unbroadcast(g, b_t.shape))

    return _make(out, parents, backward, track)


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None) -> DiffTensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis)
    track = _needs_graph(a)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _make(out, (a,), backward, track)


def tmean(a, axis=None) -> DiffTensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / count)


# ---------------------------------------------------------------------------
# backward driver


def backward(root: DiffTensor) -> None:
    """Populate .grad on every ancestor of a scalar root.

    Each node is visited exactly once, in reverse topological order.
    """
    if root.data.size != 1:
        raise ValueError(f"backward requires a scalar root, got shape {root.shape}")
    topo: list[DiffTensor] = []
    seen: set[int] = set()
    stack: list[tuple[DiffTensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None
