"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array plus an optional gradient
accumulator. Differentiable operations are recorded on the active
:class:`Tape`; ``Tape.backward(loss)`` replays the records in exact
reverse execution order and accumulates adjoints into every tensor that
``requires_grad``. Tensors with ``requires_grad=False`` never receive
gradient, which is what keeps frozen model weights untouched.

Recording only happens while a tape is active *and* at least one input
requires grad, so forward passes through fully frozen subgraphs run at
plain numpy speed.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, InvalidInputError

_TAPE_STACK: list["Tape"] = []


def current_tape() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """Dense float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional["Tape"] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            raise AssertionError("gradient routed into a tensor with requires_grad=False")
        if self.grad is None:
            # copy: backward closures may hand back views of cached arrays
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Operator sugar; library code calls the functions below directly.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of executed primitives, replayed in reverse by backward.

    One tape covers one forward pass (or one accumulation group). A tape is
    also a context manager; entering it makes it the active recording target.
    """

    __slots__ = ("_records",)

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self._records)

    def reset(self) -> None:
        self._records.clear()

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every requires_grad tensor reachable from ``loss``."""
        if loss.data.shape != ():
            raise InvalidInputError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        if loss._tape is not self or not loss.requires_grad:
            raise InvalidInputError("loss was not produced by a forward recorded on this tape")
        loss.grad = np.ones((), dtype=np.float64)
        for out, inputs, backward_fn in reversed(self._records):
            g = out.grad
            if g is None:
                continue
            grads = backward_fn(g)
            for t, gi in zip(inputs, grads):
                if gi is not None and t.requires_grad:
                    t._accumulate(gi)


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from ``loss`` on the tape that recorded it."""
    if loss._tape is None:
        raise InvalidInputError("loss was not recorded on any tape")
    loss._tape.backward(loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    """Wrap an op result, recording it if grad can flow."""
    out = Tensor(out_data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape._records.append((out, inputs, backward_fn))
    return out


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# arithmetic primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        fn = lambda g: (g, g)
    elif a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        # row-broadcast bias
        fn = lambda g: (g, g.sum(axis=0))
    elif b.ndim == 0:
        fn = lambda g: (g, np.asarray(g.sum()))
    elif a.ndim == 0:
        fn = lambda g: (np.asarray(g.sum()), g)
    else:
        raise DimensionError(f"add: cannot combine shapes {a.shape} and {b.shape}")
    return _apply(a.data + b.data, (a, b), fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: cannot combine shapes {a.shape} and {b.shape}")
    return _apply(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if a.shape == b.shape:
        fn = lambda g: (g * bd, g * ad)
    elif b.ndim == 0:
        fn = lambda g: (g * bd, np.asarray((g * ad).sum()))
    elif a.ndim == 0:
        fn = lambda g: (np.asarray((g * bd).sum()), g * ad)
    else:
        raise DimensionError(f"mul: cannot combine shapes {a.shape} and {b.shape}")
    return _apply(ad * bd, (a, b), fn)


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _apply(a.data * c, (a,), lambda g: (g * c,))


def tsum(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _apply(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
        fn = lambda g: (g @ bd.T, ad.T @ g)
    elif a.ndim == 2 and b.ndim == 1:
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
        fn = lambda g: (np.outer(g, bd), ad.T @ g)
    elif a.ndim == 1 and b.ndim == 2:
        if a.shape[0] != b.shape[0]:
            raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
        fn = lambda g: (bd @ g, np.outer(ad, g))
    elif a.ndim == 1 and b.ndim == 1:
        if a.shape[0] != b.shape[0]:
            raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
        fn = lambda g: (g * bd, g * ad)
    else:
        raise DimensionError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    return _apply(ad @ bd, (a, b), fn)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _apply(a.data.T.copy(), (a,), lambda g: (g.T,))
