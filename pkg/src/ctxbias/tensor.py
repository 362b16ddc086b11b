"""Dense tensors with reverse-mode automatic differentiation.

A deliberately small op set: matmul, add, mul, softmax, log-softmax,
layer-norm, embedding gather, mean/sum reductions, concat, masked fill,
ReLU, fused cross-entropy, plus structural ops (reshape, transpose, row
gather/scatter) that move data without arithmetic. Data is float64 by
default; every op validates that its output is finite and raises
NonFiniteError naming itself otherwise.

Graphs are recorded eagerly; ``backward(loss)`` walks the tape once and
errors on reuse. Gradients accumulate into ``.grad`` buffers that always
shape-match their tensor.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NonFiniteError, ShapeError

DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the float width (float32 is allowed for fast builds;
    gradient-check tolerances assume float64)."""
    global DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError("dtype must be numpy float32 or float64")
    DTYPE = dtype


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape of a broadcast operand."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self._done = False

    # -- basics ----------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __rsub__(self, other):
        return add(_as_tensor(other), -self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(op: str, data: np.ndarray, parents: tuple[Tensor, ...],
          backward: Callable[[np.ndarray], None] | None) -> Tensor:
    _check_finite(op, data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._done = False
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} != tensor shape {t.data.shape} (op {t._op})")
    # Accumulation always allocates a fresh array, so holding a view here is safe.
    t.grad = g if t.grad is None else t.grad + g


# -- arithmetic ops -------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make("add", data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make("mul", data, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim == 0 or b.data.ndim == 0:
        raise ShapeError("matmul requires at least 1-D operands")
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}")
    data = np.matmul(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if b.data.ndim > 1 else np.multiply.outer(g, b.data)
            if ga.shape != a.data.shape:
                ga = _unbroadcast(ga, a.data.shape)
            _accum(a, ga)
        if b.requires_grad:
            if a.data.ndim > 1:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            else:
                gb = np.multiply.outer(a.data, g)
            if gb.shape != b.data.shape:
                gb = _unbroadcast(gb, b.data.shape)
            _accum(b, gb)

    return _make("matmul", data, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0.0)

    def bwd(g):
        _accum(x, g * (x.data > 0.0))

    return _make("relu", data, (x,), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accum(x, (g - dot) * data)

    return _make("softmax", data, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def bwd(g):
        sm = np.exp(data)
        _accum(x, g - sm * g.sum(axis=axis, keepdims=True))

    return _make("log_softmax", data, (x,), bwd)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Elementwise -log softmax(logits)[target] over the last axis.

    ``targets`` is an integer array shaped like ``logits`` minus its class
    axis; the result has that same shape (0-d for a single logit vector).
    """
    idx = np.asarray(targets)
    n_classes = logits.data.shape[-1]
    if idx.shape != logits.data.shape[:-1]:
        raise ShapeError(f"targets shape {idx.shape} != logits batch shape {logits.data.shape[:-1]}")
    if idx.size and (idx.min() < 0 or idx.max() >= n_classes):
        raise IndexError(f"class index out of range [0, {n_classes})")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    data = -np.take_along_axis(logp, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        sm = np.exp(logp)
        grad = sm * g[..., None]
        np.subtract.at(grad, (*np.indices(idx.shape), idx), g)
        _accum(logits, grad)

    return _make("cross_entropy", data, (logits,), bwd)


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gain.data + offset.data

    def bwd(g):
        if x.requires_grad:
            gx = g * gain.data
            term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            _accum(x, term * inv)
        if gain.requires_grad:
            _accum(gain, _unbroadcast(g * xhat, gain.data.shape))
        if offset.requires_grad:
            _accum(offset, _unbroadcast(g, offset.data.shape))

    return _make("layer_norm", data, (x, gain, offset), bwd)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` by integer id array."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.data.shape[0]})")
    data = table.data[idx]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.ravel(), g.reshape(-1, table.data.shape[-1]))
        _accum(table, gt)

    return _make("embedding", data, (table,), bwd)


def mean(x: Tensor, axis: int) -> Tensor:
    data = x.data.mean(axis=axis)
    n = x.data.shape[axis]

    def bwd(g):
        _accum(x, np.broadcast_to(np.expand_dims(g / n, axis), x.data.shape).copy())

    return _make("mean", data, (x,), bwd)


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    data = x.data.sum(axis=axis)

    def bwd(g):
        if axis is None:
            _accum(x, np.full_like(x.data, g))
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy())

    return _make("sum", data, (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(tensors)
    data = np.concatenate([t.data for t in parts], axis=axis)
    sizes = [t.data.shape[axis] for t in parts]

    def bwd(g):
        offset = 0
        for t, size in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + size)
            _accum(t, g[tuple(sl)])
            offset += size

    return _make("concat", data, tuple(parts), bwd)


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by ``value`` (mask broadcasts)."""
    m = np.broadcast_to(np.asarray(mask, dtype=bool), x.data.shape)
    data = np.where(m, value, x.data)

    def bwd(g):
        _accum(x, np.where(m, 0.0, g))

    return _make("masked_fill", data, (x,), bwd)


# -- structural ops -------------------------------------------------------


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = x.data.reshape(shape)

    def bwd(g):
        _accum(x, g.reshape(x.data.shape))

    return _make("reshape", data, (x,), bwd)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    data = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        _accum(x, np.transpose(g, inverse))

    return _make("transpose", data, (x,), bwd)


def take_rows(x: Tensor, idx) -> Tensor:
    """Gather rows along axis 0 by integer index array."""
    indices = np.asarray(idx, dtype=np.int64)
    data = x.data[indices]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, indices, g)
        _accum(x, gx)

    return _make("take_rows", data, (x,), bwd)


def index_add(base: Tensor, idx, rows: Tensor) -> Tensor:
    """base with ``rows`` added at positions ``idx`` along axis 0."""
    indices = np.asarray(idx, dtype=np.int64)
    data = base.data.copy()
    np.add.at(data, indices, rows.data)

    def bwd(g):
        _accum(base, g)
        if rows.requires_grad:
            _accum(rows, g[indices])

    return _make("index_add", data, (base, rows), bwd)


# -- backward -------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate gradients of every requires_grad tensor reachable from loss."""
    if loss.data.ndim != 0:
        raise ContractError("backward requires a scalar loss")
    if loss._done:
        raise ContractError("backward already ran on this graph; rebuild the graph to differentiate again")
    if not loss.requires_grad:
        raise ContractError("loss does not require grad; nothing to differentiate")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(topo):
        if node._backward is None or node.grad is None:
            continue
        _check_finite(f"{node._op} gradient", node.grad)
        node._backward(node.grad)
        if node is not loss:
            node.grad = None  # free intermediate buffers
    loss._done = True
