"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a ``Tensor`` wraps a contiguous numpy
array plus an optional gradient buffer. Differentiable operations link
their output to the input tensors and stash a closure that propagates
gradients backwards. ``backward`` walks the recorded graph once in
reverse topological order.

Conventions used throughout the package:

- images and feature maps are laid out batch x channels x height x width;
- everything is float64 (an op output buffer is marked read-only, so
  tensors that took part in a graph are never mutated in place);
- binary elementwise ops follow numpy broadcasting, which is how a
  single-channel mask scales every channel of a feature map;
- ``abs`` uses subgradient 0 at 0, ``relu`` uses 0 at 0.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

Scalar = Union[int, float]
ArrayLike = Union["Tensor", np.ndarray, Scalar, Sequence]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(ArithmeticError):
    """A NaN or infinity crossed a graph boundary."""


_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording (inference fast path)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional float64 array with an optional gradient slot.

    Leaf tensors are built directly (optionally ``requires_grad``); op
    results carry the bookkeeping needed for the backward pass. Leaf
    data is validated to be finite on construction.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @classmethod
    def _from_op(
        cls,
        data: np.ndarray,
        parents: tuple,
        backward: Optional[Callable[[np.ndarray], None]],
    ) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = backward is not None
        out._parents = parents if backward is not None else ()
        out._backward = backward
        if backward is not None:
            data.setflags(write=False)
        return out

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """A leaf view of the same values, cut off from the graph."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        return out

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    # -- operators -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def abs(self) -> "Tensor":
        return abs_(self)

    def sum(self) -> "Tensor":
        return sum_(self)

    def mean(self) -> "Tensor":
        return mean(self)

    def backward(self) -> None:
        backward(self)


def _scalar_err(t: Tensor):
    raise ShapeError(f"expected a scalar tensor, got shape {t.shape}")


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(inputs: Iterable[Tensor]) -> bool:
    return _grad_enabled and any(t.requires_grad for t in inputs)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------


def _binary(a: ArrayLike, b: ArrayLike, fwd, da, db, name: str) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(
            f"{name}: shapes {a.shape} and {b.shape} are not broadcast-compatible"
        ) from exc
    if not _record((a, b)):
        return Tensor._from_op(data, (), None)

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(da(g, a.data, b.data), a.shape))
        _accumulate(b, _unbroadcast(db(g, a.data, b.data), b.shape))

    return Tensor._from_op(data, (a, b), bwd)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y: g, lambda g, x, y: g, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x, "mul")


def _unary(a: ArrayLike, fwd, dfn) -> Tensor:
    a = as_tensor(a)
    data = fwd(a.data)
    if not _record((a,)):
        return Tensor._from_op(data, (), None)

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, dfn(g, a.data, data))

    return Tensor._from_op(data, (a,), bwd)


def abs_(a: ArrayLike) -> Tensor:
    return _unary(a, np.abs, lambda g, x, y: g * np.sign(x))


def relu(a: ArrayLike) -> Tensor:
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda g, x, y: g * (x > 0.0))


def sigmoid(a: ArrayLike) -> Tensor:
    def fwd(x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _unary(a, fwd, lambda g, x, y: g * y * (1.0 - y))


def tanh(a: ArrayLike) -> Tensor:
    return _unary(a, np.tanh, lambda g, x, y: g * (1.0 - y * y))


# -- reductions --------------------------------------------------------


def sum_(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    data = np.asarray(a.data.sum())
    if not _record((a,)):
        return Tensor._from_op(data, (), None)

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, np.broadcast_to(g, a.shape).astype(np.float64))

    return Tensor._from_op(data, (a,), bwd)


def mean(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    n = a.size
    data = np.asarray(a.data.mean())
    if not _record((a,)):
        return Tensor._from_op(data, (), None)

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, np.broadcast_to(g / n, a.shape).astype(np.float64))

    return Tensor._from_op(data, (a,), bwd)


# -- structural --------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    if not _record(tensors):
        return Tensor._from_op(data, (), None)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return Tensor._from_op(data, tuple(tensors), bwd)


# -- backward pass -----------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor the scalar ``loss`` depends on.

    The recorded graph is traversed exactly once per node, in reverse
    topological order. Raises if the loss is not scalar or not finite.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("loss is not finite")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    if loss.grad is None:
        loss.grad = np.ones_like(loss.data)
    else:
        loss.grad = loss.grad + np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
