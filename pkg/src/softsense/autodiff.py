"""Dense float64 tensors with reverse-mode automatic differentiation.

The design is a flat tape: every differentiable operation appends its
output tensor to the active :class:`Tape` at creation time, so the tape is
topologically ordered by construction.  ``backward`` walks the tape in
reverse, carrying adjoints in a scratch dict and accumulating ``.grad``
only on leaves (tensors created with ``requires_grad=True``).  Calling
``backward`` twice without zeroing therefore doubles leaf gradients.

Invalid ``log``/``sqrt`` inputs do not raise: the affected elements become
NaN and the tape is flagged poisoned so a training loop can abort the step.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class PoisonedTapeError(RuntimeError):
    """Backward was requested on a tape that recorded an invalid log/sqrt."""


class Tape:
    """Ordered record of one forward computation.

    ``nodes`` holds op-output tensors in creation order; since an output
    can only be created after its inputs, the list is a topological order
    of the recorded graph.
    """

    __slots__ = ("nodes", "poisoned")

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.poisoned = False

    def record(self, t: "Tensor") -> None:
        self.nodes.append(t)

    def clear(self) -> None:
        self.nodes.clear()
        self.poisoned = False


_TAPES: list[Tape] = [Tape()]
_NO_GRAD_DEPTH = 0


def active_tape() -> Tape:
    return _TAPES[-1]


@contextlib.contextmanager
def fresh_tape():
    """Record the enclosed computation on a new tape (popped on exit)."""
    tape = Tape()
    _TAPES.append(tape)
    try:
        yield tape
    finally:
        _TAPES.pop()


@contextlib.contextmanager
def no_grad():
    """Disable recording; ops inside produce constant tensors."""
    global _NO_GRAD_DEPTH
    _NO_GRAD_DEPTH += 1
    try:
        yield
    finally:
        _NO_GRAD_DEPTH -= 1


def _recording() -> bool:
    return _NO_GRAD_DEPTH == 0


class Tensor:
    """A dense float64 array, optionally tracked for reverse-mode autodiff.

    Leaves are tensors constructed with ``requires_grad=True``; only leaves
    accumulate ``.grad``.  Op outputs carry ``requires_grad=True`` when any
    input is tracked, but their adjoints live only for the duration of a
    ``backward`` call.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Optional[Callable[[np.ndarray], tuple]] = None
        self._tape: Optional[Tape] = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flags})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph construction --------------------------------------------
    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"],
                 vjp: Callable[[np.ndarray], tuple]) -> "Tensor":
        tracked = _recording() and any(p.requires_grad for p in parents)
        out = Tensor(data)
        if tracked:
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
            out._tape = active_tape()
            out._tape.record(out)
        return out

    # -- operators -------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis=axis)

    def mean(self, axis=None):
        return mean(self, axis=axis)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def ones_like(t: Tensor) -> Tensor:
    return Tensor(np.ones_like(t.data))


# -- broadcasting helpers ----------------------------------------------

def _broadcast_check(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"shapes {a.shape} and {b.shape} are not broadcastable") from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum adjoint ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gd, sd) in enumerate(zip(g.shape, shape)):
        if sd == 1 and gd != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ----------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data)
    out = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return Tensor._from_op(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data)
    out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._from_op(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (-g,)

    return Tensor._from_op(-a.data, (a,), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(out, (a, b), vjp)


# -- elementwise nonlinearities ------------------------------------------

def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def vjp(g):
        # subgradient at exactly 0 is defined as 0
        return (g * (a.data > 0.0),)

    return Tensor._from_op(out, (a,), vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return Tensor._from_op(out, (a,), vjp)


def _poison(mask: np.ndarray, values: np.ndarray) -> np.ndarray:
    active_tape().poisoned = True
    values = values.copy()
    values[mask] = np.nan
    return values


def log(a) -> Tensor:
    a = as_tensor(a)
    invalid = a.data <= 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(np.where(invalid, 1.0, a.data))
    if invalid.any():
        out = _poison(invalid, out)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g / a.data,)

    return Tensor._from_op(out, (a,), vjp)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    invalid = a.data <= 0.0
    with np.errstate(invalid="ignore"):
        out = np.sqrt(np.where(invalid, 1.0, a.data))
    if invalid.any():
        out = _poison(invalid, out)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g * 0.5 / out,)

    return Tensor._from_op(out, (a,), vjp)


def square(a) -> Tensor:
    a = as_tensor(a)
    out = a.data * a.data

    def vjp(g):
        return (g * 2.0 * a.data,)

    return Tensor._from_op(out, (a,), vjp)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only where unclipped."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)

    def vjp(g):
        return (g * ((a.data >= lo) & (a.data <= hi)),)

    return Tensor._from_op(out, (a,), vjp)


# -- reductions ------------------------------------------------------------

def sum_(a, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (a,), vjp)


def mean(a, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis), 1.0 / count)


# -- structural ops ----------------------------------------------------------

def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    widths = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + widths)

    def vjp(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(parts)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return Tensor._from_op(out, parts, vjp)


def repeat_rows(a, n: int) -> Tensor:
    """Tile a (d,) or (1, d) tensor into (n, d); adjoint sums over rows."""
    a = as_tensor(a)
    row = a.data.reshape(1, -1)
    out = np.broadcast_to(row, (n, row.shape[1])).copy()

    def vjp(g):
        return (g.sum(axis=0).reshape(a.shape),)

    return Tensor._from_op(out, (a,), vjp)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"slice_cols expects a 2-D tensor, got {a.shape}")
    out = a.data[:, start:stop].copy()

    def vjp(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return Tensor._from_op(out, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return Tensor._from_op(out, (a,), vjp)


# -- backward ------------------------------------------------------------

def backward(out: Tensor) -> None:
    """Accumulate d(out)/d(leaf) into every reachable leaf's ``.grad``.

    ``out`` must be a scalar.  Adjoints of intermediate tensors are held in
    a scratch dict, so repeated calls accumulate (not compound) into leaves.
    """
    if out.data.size != 1:
        raise ShapeError(f"backward expects a scalar, got shape {out.shape}")
    if out._tape is None:
        # graph-free scalar: only itself as a leaf, nothing to propagate
        if out.requires_grad:
            _accumulate_leaf(out, np.ones_like(out.data))
        return
    if out._tape.poisoned:
        raise PoisonedTapeError(
            "tape poisoned by log/sqrt of a non-positive value")

    adjoint: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
    for node in reversed(out._tape.nodes):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            if parent._vjp is None:
                _accumulate_leaf(parent, pg)
            else:
                key = id(parent)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + pg
                else:
                    adjoint[key] = pg


def _accumulate_leaf(leaf: Tensor, g: np.ndarray) -> None:
    if leaf.grad is None:
        leaf.grad = np.zeros_like(leaf.data)
    leaf.grad += np.asarray(g, dtype=np.float64).reshape(leaf.shape)


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.zero_grad()
