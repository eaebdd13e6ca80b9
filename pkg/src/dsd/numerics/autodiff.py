"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op is a plain function that computes its forward value
with numpy and attaches a closure mapping the output gradient to one
gradient per input.  The tape is rebuilt on every forward pass; nothing is
mutated in place once it participates in a graph.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from ..errors import DimensionError, NumericError, ParameterError, UsageError

DTYPE = np.float64

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Build no tape inside the block (thread-local)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def enable_grad() -> Iterator[None]:
    prev = is_grad_enabled()
    _state.grad_enabled = True
    try:
        yield
    finally:
        _state.grad_enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A float64 array that may record how it was computed."""

    __slots__ = ("data", "requires_grad", "grad", "op", "name", "retain_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite value in tensor {name or ''}".rstrip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.name = name
        self.retain_grad = False
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward: BackwardFn, op: str) -> "Tensor":
        # One reduction instead of an isfinite() temporary: NaN/Inf survive a sum.
        if not np.isfinite(np.add.reduce(data, axis=None)):
            if not np.isfinite(data).all():
                raise NumericError(f"{op} produced a non-finite value")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.name = None
        out.retain_grad = False
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.op = "leaf"
        out.name = self.name
        out.retain_grad = False
        out._parents = ()
        out._backward = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    # -- operator sugar -----------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def _not_scalar(t: Tensor):
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# Graph


@dataclass(frozen=True)
class OpRecord:
    op: str
    inputs: tuple[int, ...]
    output: int


class Graph:
    """Topologically ordered view of the tape that produced ``root``.

    Only nodes that require grad are included; node ids are positions in
    :attr:`nodes`.
    """

    def __init__(self, root: Tensor):
        self.nodes: list[Tensor] = _topological_order(root)
        index = {id(n): i for i, n in enumerate(self.nodes)}
        self.records = [
            OpRecord(n.op, tuple(index[id(p)] for p in n._parents if id(p) in index), i)
            for i, n in enumerate(self.nodes)
        ]

    def __len__(self) -> int:
        return len(self.nodes)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Intermediate nodes keep their gradient only when ``retain_grad`` is set.
    Calling twice without zeroing adds the gradients.
    """
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires grad")
    nodes = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None or node.retain_grad:
            node.grad = np.array(g, dtype=DTYPE) if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# Elementwise and structural ops


def add(a, b) -> Tensor:
    """Elementwise ``a + b`` with numpy broadcasting.

    Gradient: dL/da = unbroadcast(g), dL/db = unbroadcast(g).

    >>> add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data
    array([4., 6.])
    >>> add(Tensor([[1.0], [2.0]]), Tensor([10.0, 20.0])).data
    array([[11., 21.],
           [12., 22.]])
    >>> add(Tensor(0.5), 0.25).data
    array(0.75)
    """
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def multiply(a, b) -> Tensor:
    """Elementwise product with broadcasting.

    Gradient: dL/da = unbroadcast(g * b), dL/db = unbroadcast(g * a).

    >>> multiply(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data
    array([3., 8.])
    >>> multiply(Tensor([[1.0, 2.0]]), Tensor([[2.0], [3.0]])).data
    array([[2., 4.],
           [3., 6.]])
    >>> multiply(Tensor([2.0]), 0.0).data
    array([0.])
    """
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "multiply")
    ad, bd = a.data, b.data
    return Tensor._result(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "multiply"
    )


def divide(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "divide")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return Tensor._result(out, (a, b), bw, "divide")


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant.

    Gradient: dL/dx = c * g.

    >>> scale(Tensor([1.0, -2.0]), 3.0).data
    array([ 3., -6.])
    >>> scale(Tensor([[1.0]]), 0.0).data
    array([[0.]])
    >>> scale(Tensor(2.0), -0.5).data
    array(-1.)
    """
    c = float(c)
    return Tensor._result(x.data * c, (x,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    """Matrix product ``a @ b`` with numpy's stacked/broadcast semantics.

    Gradient: dL/da = g @ b^T, dL/db = a^T @ g (reduced over broadcast
    batch dimensions).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # Fold the batch into one gemm: (..., n, k) @ (k, m).
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = ad.reshape(-1, ad.shape[-1]).T @ g2 if b.requires_grad else None
            return ga, gb

        return Tensor._result(out, (a, b), bw, "matmul")
    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise DimensionError(f"matmul batch extents do not broadcast: {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return Tensor._result(out, (a, b), bw, "matmul")


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._result(np.asarray(out, dtype=DTYPE), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Arithmetic mean over ``axis`` (all axes when None).

    Gradient: dL/dx = broadcast(g) / count, count = number of averaged items.

    >>> mean(Tensor([1.0, 2.0, 3.0])).data
    array(2.)
    >>> mean(Tensor([[1.0, 3.0], [5.0, 7.0]]), axis=0).data
    array([3., 5.])
    >>> mean(Tensor([[1.0, 3.0]]), axis=-1, keepdims=True).data
    array([[2.]])
    """
    shape = x.shape
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size // max(np.asarray(out).size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return Tensor._result(np.asarray(out, dtype=DTYPE), (x,), bw, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    """Row-major reshape.

    Gradient: dL/dx = reshape(g, x.shape).

    >>> reshape(Tensor([1.0, 2.0, 3.0, 4.0]), (2, 2)).data
    array([[1., 2.],
           [3., 4.]])
    >>> reshape(Tensor([[1.0, 2.0]]), (-1,)).data
    array([1., 2.])
    >>> reshape(Tensor([5.0]), ()).data
    array(5.)
    """
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {src} into {shape}") from None
    return Tensor._result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return Tensor._result(out, (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return Tensor._result(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along an existing axis.

    Gradient: dL/dx_k = the slice of g that x_k occupied.

    >>> concat([Tensor([1.0]), Tensor([2.0, 3.0])]).data
    array([1., 2., 3.])
    >>> concat([Tensor([[1.0]]), Tensor([[2.0]])], axis=1).data
    array([[1., 2.]])
    >>> concat([Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0]])], axis=0).shape
    (2, 2)
    """
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor._result(out, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"stack: {exc}") from None
    n = len(tensors)
    return Tensor._result(
        out, tuple(tensors), lambda g: tuple(np.squeeze(s, axis) for s in np.split(g, n, axis=axis)), "stack"
    )


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape
    out = x.data[index]
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._result(np.array(out, dtype=DTYPE), (x,), bw, "getitem")


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup ``table[ids]`` along axis 0; repeated ids accumulate."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, ids, g)
        return (full,)

    return Tensor._result(table.data[ids], (table,), bw, "take_rows")


# ---------------------------------------------------------------------------
# Pointwise nonlinearities


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return Tensor._result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    """Natural logarithm; non-positive inputs are a numeric error.

    Gradient: dL/dx = g / x.

    >>> log(Tensor([1.0])).data
    array([0.])
    >>> round(float(log(Tensor(np.e)).data), 12)
    1.0
    >>> log(Tensor([0.5, 2.0])).data.round(6)
    array([-0.693147,  0.693147])
    """
    xd = x.data
    if (xd <= 0).any():
        raise NumericError("log of a non-positive value")
    return Tensor._result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, evaluated without overflow for large |x|.

    Gradient: dL/dx = g * s * (1 - s).

    >>> sigmoid(Tensor([0.0])).data
    array([0.5])
    >>> float(sigmoid(Tensor(800.0)).data)
    1.0
    >>> float(sigmoid(Tensor(-800.0)).data) < 1e-300
    True
    """
    xd = x.data
    z = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return Tensor._result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(over="ignore"):
        s = np.exp(-xd)
    s += 1.0
    np.reciprocal(s, out=s)
    out = xd * s

    def bw(g):
        d = 1.0 - s
        d *= out
        d += s
        d *= g
        return (d,)

    return Tensor._result(out, (x,), bw, "silu")


def rms_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x**2, -1) + eps)`` over the last axis.

    Gradient: dL/dx = r*g - r**3 * x * mean(g*x, -1), r = the inverse RMS.
    """
    xd = x.data
    r = 1.0 / np.sqrt(np.einsum("...i,...i->...", xd, xd)[..., None] / xd.shape[-1] + eps)
    out = xd * r

    def bw(g):
        gx = np.einsum("...i,...i->...", g, xd)[..., None] / xd.shape[-1]
        return (r * g - (r * r * r * gx) * xd,)

    return Tensor._result(out, (x,), bw, "rms_norm")


def power(x: Tensor, p: float) -> Tensor:
    xd = x.data
    p = float(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = xd**p
    return Tensor._result(out, (x,), lambda g: (g * p * xd ** (p - 1.0),), "power")


def sqrt(x: Tensor) -> Tensor:
    xd = x.data
    if (xd < 0).any():
        raise NumericError("sqrt of a negative value")
    out = np.sqrt(xd)
    with np.errstate(divide="ignore", invalid="ignore"):
        return Tensor._result(out, (x,), lambda g: (np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0),), "sqrt")


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip into [lo, hi]; the gradient is zero where clipping was active."""
    xd = x.data
    out = np.clip(xd, lo, hi)
    inside = np.ones(xd.shape, dtype=bool)
    if lo is not None:
        inside &= xd >= lo
    if hi is not None:
        inside &= xd <= hi
    return Tensor._result(out, (x,), lambda g: (np.where(inside, g, 0.0),), "clamp")


# ---------------------------------------------------------------------------
# Reductions used by attention and pooling


def softmax(x: Tensor, axis: int = -1, scale: float = 1.0) -> Tensor:
    """``softmax(scale * x)`` along ``axis`` with max subtraction.

    Gradient: dL/dx = scale * y * (g - sum(g * y, axis)).
    """
    if not scale > 0:
        raise ParameterError(f"softmax scale must be positive, got {scale}")
    xd = x.data
    if not np.isfinite(xd).all():
        raise NumericError("softmax input is not finite")
    z = scale * (xd - xd.max(axis=axis, keepdims=True))
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (scale * y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._result(y, (x,), bw, "softmax")


def softmax_rows(x: Tensor, scale: float = 1.0) -> Tensor:
    """Row-wise softmax of an ``n x m`` matrix (or a stack of them)."""
    return softmax(x, axis=-1, scale=scale)


def logsumexp(x: Tensor, axis: int, lam: float = 1.0, keepdims: bool = False) -> Tensor:
    """Smooth maximum ``(1/lam) * log(sum(exp(lam * x)))`` along ``axis``.

    Gradient: dL/dx = g * softmax(lam * x, axis).
    """
    lam = float(lam)
    if not lam > 0:
        raise ParameterError(f"LogSumExp temperature must be positive, got {lam}")
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    e = np.exp(lam * (xd - m))
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s) / lam
    w = e / s
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * w,)

    return Tensor._result(out, (x,), bw, "logsumexp")


def logsumexp_over_rows(a: Tensor, lam: float) -> Tensor:
    """Per-column smooth max over the row axis: ``n x m -> m``.

    Works on stacks too: the reduction is always over axis -2.
    """
    if a.ndim < 2:
        raise DimensionError(f"logsumexp_over_rows needs a matrix, got shape {a.shape}")
    return logsumexp(a, axis=-2, lam=lam)


def amax(x: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximiser."""
    xd = x.data
    idx = np.expand_dims(xd.argmax(axis=axis), axis)
    out = np.take_along_axis(xd, idx, axis=axis)
    shape = xd.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return Tensor._result(np.squeeze(out, axis=axis), (x,), bw, "amax")
