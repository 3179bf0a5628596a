"""Float64 arrays with reverse-accumulation differentiation.

Operations on :class:`Tensor` values are recorded on the innermost active
:class:`GradientTape` whenever one of their inputs is tracked (a leaf created
with ``requires_grad=True`` or the output of an earlier recorded op).  Outside
of a tape every op is plain numpy arithmetic.

Broadcasting follows trailing-extent alignment with extent-1 stretching, the
same rule numpy uses; gradients flowing back through a stretched axis are
summed over it.

    >>> w = Tensor([[2.0]], requires_grad=True)
    >>> with GradientTape() as tape:
    ...     loss = (w * w).sum()
    >>> tape.gradient(loss, [w])[0]
    array([[4.]])
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, NonFiniteError

_TAPES: list["GradientTape"] = []


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    # a NaN or inf anywhere poisons the sum; only a non-finite sum needs the full scan
    with np.errstate(over="ignore", invalid="ignore"):
        total = np.add.reduce(arr, axis=None)
    if not math.isfinite(total) and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced a non-finite value")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after a broadcast."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a} and {b} are not broadcastable") from None


class Tensor:
    """Immutable float64 array that may participate in a gradient tape."""

    __slots__ = ("data", "requires_grad", "_tape", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(extent <= 0 for extent in arr.shape):
            raise DimensionError(f"extents must be positive, got {arr.shape}")
        self.data = _check_finite(arr, "Tensor")
        self.requires_grad = requires_grad
        self._tape = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = False
        out._tape = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class GradientTape:
    """Ordered record of primitive ops for one reverse sweep.

    A tape can be differentiated exactly once; asking again raises
    :class:`ContractError`.  Nodes are appended as ops execute, which is
    already a topological order, so the sweep simply walks the list backwards.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple, Callable]] = []
        self._consumed = False

    def __enter__(self):
        if self._consumed:
            raise ContractError("tape already consumed")
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self._nodes)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def _tracks(self, t) -> bool:
        return isinstance(t, Tensor) and (t.requires_grad or t._tape is self)

    def _record(self, out: Tensor, inputs: tuple, vjp: Callable) -> None:
        out._tape = self
        self._nodes.append((out, inputs, vjp))

    def _sweep(self, target: Tensor) -> dict[int, tuple[Tensor, np.ndarray]]:
        if self._consumed:
            raise ContractError("tape already consumed by a backward pass")
        if not isinstance(target, Tensor) or target.size != 1:
            raise ContractError("backward needs a single-element tensor")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
        for out, inputs, vjp in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            needs = tuple(self._tracks(t) for t in inputs)
            for t, gi in zip(inputs, vjp(g, needs)):
                if gi is None or not self._tracks(t):
                    continue
                if t.requires_grad:
                    prev = leaves.get(id(t))
                    leaves[id(t)] = (t, gi if prev is None else prev[1] + gi)
                else:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
        if target.requires_grad:
            prev = leaves.get(id(target))
            one = np.ones_like(target.data)
            leaves[id(target)] = (target, one if prev is None else prev[1] + one)
        self._nodes = []
        return leaves

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of ``target`` w.r.t. ``sources``; zeros where unreachable."""
        leaves = self._sweep(target)
        return [
            leaves[id(s)][1].reshape(s.shape) if id(s) in leaves else np.zeros_like(s.data)
            for s in sources
        ]


def backward(scalar: Tensor, tape: GradientTape) -> dict[Tensor, np.ndarray]:
    """Reverse sweep returning a gradient for every leaf parameter reached."""
    return {t: g.reshape(t.shape) for t, g in tape._sweep(scalar).values()}


def _make(arr: np.ndarray, op: str, inputs: tuple, vjp: Callable) -> Tensor:
    _check_finite(arr, op)
    out = Tensor._wrap(arr)
    if _TAPES:
        tape = _TAPES[-1]
        if any(tape._tracks(t) for t in inputs):
            tape._record(out, inputs, vjp)
    return out


def tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# binary ops


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")

    def vjp(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _make(a.data + b.data, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")

    def vjp(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None,
        )

    return _make(a.data - b.data, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")

    def vjp(g, needs):
        return (
            _unbroadcast(g * b.data, a.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.shape) if needs[1] else None,
        )

    with np.errstate(over="ignore", invalid="ignore"):
        y = a.data * b.data
    return _make(y, "mul", (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")
    if np.any(b.data == 0):
        raise DomainError("division by zero")

    def vjp(g, needs):
        return (
            _unbroadcast(g / b.data, a.shape) if needs[0] else None,
            _unbroadcast(-g * a.data / b.data**2, b.shape) if needs[1] else None,
        )

    return _make(a.data / b.data, "div", (a, b), vjp)


def minimum(a, b) -> Tensor:
    """Elementwise minimum; ties send the gradient to ``a``."""
    a, b = tensor(a), tensor(b)
    _broadcast_shape(a.shape, b.shape, "minimum")
    pick_a = a.data <= b.data

    def vjp(g, needs):
        return (
            _unbroadcast(np.where(pick_a, g, 0.0), a.shape) if needs[0] else None,
            _unbroadcast(np.where(pick_a, 0.0, g), b.shape) if needs[1] else None,
        )

    return _make(np.where(pick_a, a.data, b.data), "minimum", (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def vjp(g, needs):
        return (
            g @ b.data.T if needs[0] else None,
            a.data.T @ g if needs[1] else None,
        )

    return _make(a.data @ b.data, "matmul", (a, b), vjp)


# unary ops


def neg(a) -> Tensor:
    a = tensor(a)
    return _make(-a.data, "neg", (a,), lambda g, needs: (-g,))


def relu(a) -> Tensor:
    a = tensor(a)
    # subgradient at exactly zero is zero
    x = a.data
    return _make(np.maximum(x, 0.0), "relu", (a,), lambda g, needs: (g * (x > 0),))


def tanh(a) -> Tensor:
    a = tensor(a)
    y = np.tanh(a.data)
    return _make(y, "tanh", (a,), lambda g, needs: (g * (1.0 - y * y),))


def exp(a) -> Tensor:
    a = tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _make(y, "exp", (a,), lambda g, needs: (g * y,))


def log(a) -> Tensor:
    a = tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    x = a.data
    return _make(np.log(x), "log", (a,), lambda g, needs: (g / x,))


def square(a) -> Tensor:
    a = tensor(a)
    x = a.data
    with np.errstate(over="ignore"):
        y = x * x
    return _make(y, "square", (a,), lambda g, needs: (2.0 * g * x,))


def clip(a, low: float, high: float) -> Tensor:
    """Clamp to ``[low, high]``; the gradient is zero where clamping bites."""
    a = tensor(a)
    inside = (a.data >= low) & (a.data <= high)
    return _make(np.clip(a.data, low, high), "clip", (a,), lambda g, needs: (g * inside,))


_UNARY = {"relu": relu, "tanh": tanh, "exp": exp, "log": log, "neg": neg, "square": square}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div, "minimum": minimum}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch an elementwise primitive by name."""
    if op in _UNARY:
        (x,) = args
        return _UNARY[op](x)
    if op in _BINARY:
        a, b = args
        return _BINARY[op](a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


# reductions and structural ops


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = tensor(a)
    shape = a.shape

    def vjp(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), "sum", (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def take(a, index) -> Tensor:
    """Gather rows ``a[index]`` along the first axis."""
    a = tensor(a)
    index = np.asarray(index, dtype=np.intp)

    def vjp(g, needs):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], "take", (a,), vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(tensor(p) for p in parts)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def vjp(g, needs):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), "concat", parts, vjp)


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Rescale ``grads`` so their joint L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NonFiniteError("gradient norm is not finite")
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = [g * scale for g in grads]
    return grads, norm
