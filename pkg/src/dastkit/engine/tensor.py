"""Dense tensors, trainable parameters, and the reverse-mode gradient tape.

Everything in the package computes on these three types. Operations (see
``ops``) record themselves on the active tape; ``Tape.backward`` replays the
record in exact reverse execution order and accumulates partials, so a value
consumed by k operations receives the sum of k partials.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigurationError(ValueError):
    """A structural parameter (stride chain, architecture tag, ...) is invalid."""


class EmptyGradientError(RuntimeError):
    """An optimizer step was requested before any backward pass populated gradients."""


class Tensor:
    """Dense n-dimensional real array, row-major, wrapping a numpy buffer.

    ``requires_grad`` marks a leaf whose gradient should be tracked by the
    tape (inputs of adversarial attacks, for example). Non-leaf tensors get
    the flag set automatically when an operation records them.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data: ArrayLike, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """Trainable tensor with a persistent gradient buffer of identical shape.

    ``grad`` is allocated at construction and only ever mutated in place, so
    its shape always matches the value. ``grad_populated`` records whether a
    backward pass has deposited into this parameter since the last
    ``zero_grad``; optimizers use it to reject stepping before any backward.
    """

    __slots__ = ("grad", "trainable", "grad_populated", "name")

    def __init__(self, data: ArrayLike, dtype=None, trainable: bool = True, name: str = ""):
        super().__init__(data, dtype=dtype)
        self.grad = np.zeros_like(self.data)
        self.trainable = trainable
        self.grad_populated = False
        self.name = name

    @property
    def requires_grad(self) -> bool:  # type: ignore[override]
        return self.trainable

    @requires_grad.setter
    def requires_grad(self, value: bool) -> None:
        # Tensor.__init__ assigns requires_grad before trainable exists; the
        # flag is an alias for trainable on parameters.
        self.trainable = bool(value)

    def zero_grad(self) -> None:
        self.grad.fill(0)
        self.grad_populated = False

    def __repr__(self) -> str:
        tag = self.name or "?"
        return f"Parameter({tag}, shape={self.shape}, trainable={self.trainable})"


class _Record:
    """One executed differentiable operation: inputs, output, and its adjoint."""

    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Gradients:
    """Read-only view of leaf gradients computed by one backward pass."""

    def __init__(self, table: dict):
        self._table = table

    def wrt(self, tensor: Tensor) -> Optional[np.ndarray]:
        """Gradient of the loss w.r.t. ``tensor``, or None if it was not reached."""
        if isinstance(tensor, Parameter):
            return tensor.grad
        return self._table.get(id(tensor))


_tls = threading.local()


def current_tape() -> Optional["Tape"]:
    return getattr(_tls, "tape", None)


class pause_tape:
    """Suspend recording for a block: oracle queries and probe evaluations
    must never land on the training tape."""

    def __enter__(self):
        self._saved = current_tape()
        _tls.tape = None
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.tape = self._saved


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Used as a context manager: operations executed inside the ``with`` block
    are recorded; ``backward`` then traverses them in exact reverse execution
    order. One tape belongs to one thread; nesting is not supported.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._closed = False

    def __enter__(self) -> "Tape":
        if current_tape() is not None:
            raise RuntimeError("a tape is already active on this thread")
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tls.tape = None

    def record(self, inputs, output: Tensor, backward_fn: Callable) -> None:
        output.requires_grad = True
        self._records.append(_Record(inputs, output, backward_fn))

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> Gradients:
        """Accumulate d(loss)/d(leaf) for every reachable leaf.

        Trainable parameters receive their partials summed into ``param.grad``
        (in addition to whatever was already there, so call ``zero_grad``
        first for a fresh gradient). Plain tensors flagged ``requires_grad``
        are reported through the returned ``Gradients``.
        """
        if self._closed:
            raise RuntimeError("backward already called on this tape")
        self._closed = True
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

        table: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self._records):
            out_grad = table.pop(id(rec.output), None)
            if out_grad is None:
                continue  # not on the path from the loss
            partials = rec.backward_fn(out_grad)
            for inp, part in zip(rec.inputs, partials):
                if part is None:
                    continue
                if isinstance(inp, Parameter):
                    inp.grad += part
                    inp.grad_populated = True
                else:
                    key = id(inp)
                    if key in table:
                        # Out-of-place: a backward_fn may hand the same array
                        # to several inputs, so never mutate a stored partial.
                        table[key] = table[key] + part
                    else:
                        table[key] = part
        # Outputs of recorded ops were popped during traversal; what remains
        # are leaves. Keep them all so Gradients.wrt can serve any leaf.
        return Gradients(table)
