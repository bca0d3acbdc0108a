"""Tape-based reverse-mode autodiff over numpy arrays.

A ``Tape`` records every differentiable operation executed inside its
context.  ``Tape.backward`` (or ``Tensor.backward``) replays the recorded
nodes in reverse, accumulating gradients into ``Tensor.grad``.  Repeated
backward calls without a ``reset`` accumulate into the existing gradients;
they never raise.

Tensors are plain containers around a numpy array: no views are shared
with callers, and a tensor recorded on one tape must not be reused on
another after a reset.  Tapes are single-threaded; independent training
contexts get independent tapes (thread-local active-tape stack).
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "ShapeError",
    "default_dtype",
    "set_default_dtype",
    "active_tape",
]


class ShapeError(ValueError):
    """Incompatible operand shapes, tagged with the op that rejected them."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tape_stack", None)
    if stack is None:
        stack = []
        _local.tape_stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


def default_dtype() -> np.dtype:
    return getattr(_local, "default_dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    """Set the dtype used for tensors created without an explicit dtype."""
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _local.default_dtype = dtype


class Tensor:
    """N-d float array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() on tensor of shape {self.shape}")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"

    # -- gradients -----------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        # First write stores the buffer as-is (backward functions may hand us
        # views; nothing mutates grads in place, so aliasing is harmless).
        if self.grad is None:
            self.grad = g if g.dtype == self.data.dtype else g.astype(self.data.dtype)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Backpropagate from this scalar through the tape that recorded it."""
        if self._tape is None:
            raise RuntimeError("backward() on a tensor with no recorded operations")
        self._tape.backward(self)

    # -- operator sugar (implemented in ops.py, bound at import) --------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable ops; context manager activates it."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()
        # The graph is cyclic (tensor -> tape -> tensor); dropping the nodes
        # here lets plain refcounting free every intermediate immediately.
        # backward() must therefore run inside the `with` block.
        self._nodes.clear()

    def record(self, op: str, inputs: tuple, output: Tensor, backward_fn) -> None:
        output._tape = self
        self._nodes.append(_Node(op, inputs, output, backward_fn))

    def reset(self) -> None:
        """Drop every recorded node, freeing the referenced tensors."""
        self._nodes.clear()

    def backward(self, loss: Tensor) -> None:
        """Accumulate gradients of ``loss`` into every requires_grad ancestor.

        ``loss`` must be scalar.  Calling backward twice without a reset
        accumulates (gradients add up); this is the documented behaviour.
        """
        if loss.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {loss.shape}")
        if not self._nodes:
            raise RuntimeError("backward() on an empty tape")
        loss.accumulate_grad(np.ones_like(loss.data))
        for node in reversed(self._nodes):
            g = node.output.grad
            if g is None:
                continue
            grads = node.backward_fn(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is not None and inp.requires_grad:
                    inp.accumulate_grad(gi)


class no_grad:
    """Context manager that suspends recording on the active tape."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        assert stack and stack[-1] is None
        stack.pop()
