"""Dense tensors with tape-recorded reverse-mode differentiation.

A :class:`Tensor` is a thin wrapper around a numpy array. Operations in
:mod:`surfuse.ops` record a node on the active :class:`Tape` whenever one of
their inputs requires a gradient; :meth:`Tape.backward` then walks the
recorded nodes in reverse and accumulates gradients into leaf tensors.

Gradients accumulate: callers zero them between optimizer steps.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "TapeError",
    "ShapeError",
    "NumericError",
    "ConfigError",
    "backward",
    "get_default_dtype",
    "set_default_dtype",
    "precision",
    "current_tape",
    "make_rng",
]

_DEFAULT_DTYPE = np.float32
_local = threading.local()


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class NumericError(ArithmeticError):
    """Raised when a computation produces or receives non-finite values."""


class TapeError(RuntimeError):
    """Raised on misuse of the gradient tape."""


class ConfigError(ValueError):
    """Raised for invalid hyperparameters or layer configurations."""


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default floating dtype (e.g. to float64 for gradchecks)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator (Philox) from an int seed or a SeedSequence."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _DEFAULT_DTYPE, copy=True)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            else:
                self.grad.fill(0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Operator sugar; the implementations live in surfuse.ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)


class Parameter(Tensor):
    """A named, learnable tensor.

    ``trainable=False`` marks the parameter frozen: gradients may still flow
    through it, but optimizers must leave its values untouched.
    """

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str = "", trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.trainable = trainable

    @property
    def tensor(self) -> "Parameter":
        return self

    def __repr__(self) -> str:
        state = "" if self.trainable else ", frozen"
        return f"Parameter({self.name!r}, shape={self.shape}{state})"


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass(frozen=True)
class Node:
    inputs: tuple
    output: Tensor
    backward: BackwardFn
    op: str


class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager; operations executed inside the block are
    recorded on this tape::

        with Tape() as tape:
            loss = ops.cross_entropy(model(x), y)
        tape.backward(loss)

    With ``skip_frozen=True`` frozen parameters are treated as constants:
    nothing upstream of them is recorded and their ``.grad`` stays untouched.
    """

    def __init__(self, skip_frozen: bool = False):
        self.nodes: list[Node] = []
        self.skip_frozen = skip_frozen
        self._produced: set[int] = set()

    def tracks(self, t: Tensor) -> bool:
        if not t.requires_grad:
            return False
        return not (self.skip_frozen and isinstance(t, Parameter) and not t.trainable)

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape stack corrupted: exiting a tape that is not active")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs: tuple, output: Tensor, fn: BackwardFn, op: str = "") -> None:
        for t in inputs:
            if not isinstance(t, Tensor):
                raise TapeError(f"tape inputs must be tensors, got {type(t).__name__}")
        self.nodes.append(Node(inputs, output, fn, op))
        self._produced.add(id(output))

    def backward(self, loss: Tensor) -> None:
        if id(loss) not in self._produced:
            raise TapeError("loss was not recorded on this tape")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = self._produced
        for node in reversed(self.nodes):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not self.tracks(inp):
                    continue
                if gi.shape != inp.data.shape:
                    raise ShapeError(
                        f"{node.op}: gradient shape {gi.shape} != input shape {inp.data.shape}"
                    )
                key = id(inp)
                if key in produced:
                    acc = pending.get(key)
                    pending[key] = gi if acc is None else acc + gi
                else:
                    if inp.grad is None:
                        inp.grad = np.zeros_like(inp.data)
                    inp.grad += gi


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every leaf that contributed to ``loss``."""
    tape = tape or current_tape()
    if tape is None:
        raise TapeError("no tape given and none active")
    tape.backward(loss)
