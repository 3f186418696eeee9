"""Dense 2-D tensors with reverse-mode differentiation.

Every value is a float64 matrix. Operations record themselves on a dynamic
tape as they run; :func:`backward` replays the tape in reverse creation
order and frees it afterwards. Broadcasting is limited to row vectors
``(1, n)``, column vectors ``(m, 1)`` and scalars ``(1, 1)``.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateRowError, DimensionError, GraphError, NumericalError, ParameterError

__all__ = [
    "Tensor",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "transpose",
    "log",
    "relu",
    "absolute",
    "max_with_constant",
    "sum_all",
    "mean_all",
    "batch_mean",
    "softmax_rows",
    "l2_normalize_rows",
    "row_slice",
    "concat_rows",
    "concat_cols",
    "detach",
    "backward",
    "zero_grad",
    "no_grad",
    "PROB_FLOOR",
]

# Floor applied to probabilities before any log.
PROB_FLOOR = 1e-12
NORM_FLOOR = 1e-12

_ids = itertools.count()
_recording = True

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A float64 matrix that may participate in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_id", "_leaf", "_freed", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._id = next(_ids)
        self._leaf = True
        self._freed = False
        self._consumed = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._id = next(_ids)
        out._freed = False
        out._consumed = False
        out.requires_grad = _recording and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = fn
            out._leaf = False
        else:
            out._parents = ()
            out._backward = None
            out._leaf = True
        return out

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return NotImplemented

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def detach(self) -> Tensor:
        return detach(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def _bw(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return Tensor._from_op(ad @ bd, (a, b), _bw)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product with row/column broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def _bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(ad * bd, (a, b), _bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._from_op(x.data * c, (x,), lambda g: (g * c,))


def neg(x: Tensor) -> Tensor:
    return Tensor._from_op(-x.data, (x,), lambda g: (-g,))


def transpose(x: Tensor) -> Tensor:
    return Tensor._from_op(x.data.T.copy(), (x,), lambda g: (g.T,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise NumericalError("log: non-positive input; clamp probabilities first")
    return Tensor._from_op(np.log(xd), (x,), lambda g: (g / xd,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return Tensor._from_op(np.abs(x.data), (x,), lambda g: (g * sign,))


def max_with_constant(x: Tensor, c: float) -> Tensor:
    """``max(x, c)`` elementwise; the adjoint passes only where ``x > c``."""
    mask = x.data > c
    return Tensor._from_op(np.where(mask, x.data, float(c)), (x,), lambda g: (g * mask,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return Tensor._from_op(np.array([[x.data.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),))


def mean_all(x: Tensor) -> Tensor:
    shape = x.shape
    n = x.data.size
    return Tensor._from_op(np.array([[x.data.mean()]]), (x,), lambda g: (np.full(shape, g[0, 0] / n),))


def batch_mean(x: Tensor) -> Tensor:
    """Column means, i.e. the average row: ``(m, n) -> (1, n)``."""
    m = x.shape[0]
    shape = x.shape
    return Tensor._from_op(x.data.mean(axis=0, keepdims=True), (x,), lambda g: (np.broadcast_to(g / m, shape),))


def softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise ParameterError(f"softmax temperature must be positive, got {temperature}")
    t = float(temperature)
    s = x.data / t
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    y = e / e.sum(axis=1, keepdims=True)

    def _bw(g):
        return ((g - (g * y).sum(axis=1, keepdims=True)) * y / t,)

    return Tensor._from_op(y, (x,), _bw)


def l2_normalize_rows(x: Tensor) -> Tensor:
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    bad = np.flatnonzero(norms[:, 0] < NORM_FLOOR)
    if bad.size:
        raise DegenerateRowError(f"rows {bad[:5].tolist()} have norm below {NORM_FLOOR}")
    y = x.data / norms

    def _bw(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norms,)

    return Tensor._from_op(y, (x,), _bw)


def row_slice(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def _bw(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return Tensor._from_op(x.data[start:stop], (x,), _bw)


def _concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    other = 1 - axis
    if len({t.shape[other] for t in tensors}) != 1:
        raise DimensionError(f"concat: mismatched shapes {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _bw(g):
        if axis == 0:
            return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(tensors)))
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, _bw)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    return _concat(tensors, 0)


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    return _concat(tensors, 1)


def detach(x: Tensor) -> Tensor:
    """Same values, cut from the graph."""
    return Tensor(x.data)


def _collect(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen.add(node._id)
        if node._freed:
            raise GraphError("graph segment was already consumed by an earlier backward pass")
        nodes.append(node)
        stack.extend(p for p in node._parents if p.requires_grad)
    # creation ids are monotone, so this is exact reverse recording order
    nodes.sort(key=lambda t: t._id, reverse=True)
    return nodes


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every upstream tensor requiring grad."""
    if loss.shape != (1, 1):
        raise GraphError(f"backward needs a scalar (1x1) root, got {loss.shape}")
    if loss._consumed:
        raise GraphError("backward already ran on this loss; rebuild the graph first")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor requiring grad")
    nodes = _collect(loss)
    for node in nodes:
        if not np.all(np.isfinite(node.data)):
            raise NumericalError(f"non-finite values in graph node {node!r}")

    grads: dict[int, np.ndarray] = {loss._id: np.ones((1, 1))}
    for node in nodes:
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node._leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent._id)
            grads[parent._id] = pg if prev is None else prev + pg

    for node in nodes:
        if not node._leaf:
            node._parents = ()
            node._backward = None
            node._freed = True
    loss._consumed = True


@contextlib.contextmanager
def no_grad():
    """Run operations without recording them on the tape."""
    global _recording
    prev, _recording = _recording, False
    try:
        yield
    finally:
        _recording = prev


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
