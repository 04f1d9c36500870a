"""Tensors, the recording tape and reverse-mode differentiation.

Every differentiable computation goes through :func:`forward_op`, which looks
up a kernel in :data:`OPS`, runs it on raw numpy arrays and, when a tape is
active and some input requires a gradient, appends a record holding the
kernel's backward closure. :func:`backward` walks the records in exact
reverse order.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32


class NumericsError(RuntimeError):
    """Base class for engine errors."""


class ShapeError(NumericsError, ValueError):
    pass


class NonFiniteError(NumericsError, FloatingPointError):
    pass


class TapeError(NumericsError):
    pass


def get_default_dtype() -> np.dtype:
    return np.dtype(_DEFAULT_DTYPE)


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the precision used for new tensors and parameters."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Tensor:
    """A dense array node. ``data`` is a plain numpy array."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on array of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named learnable array with its gradient and optimizer state."""

    __slots__ = ("name", "state")

    def __init__(self, data, name: str = ""):
        arr = np.array(data)
        super().__init__(arr if arr.dtype.kind == "f" else arr.astype(_DEFAULT_DTYPE), requires_grad=True)
        self.name = name
        self.state: dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class Record:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of differentiable operations for a single step."""

    records: list[Record] = field(default_factory=list)
    consumed: bool = False

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()
        self.consumed = False


_ACTIVE_TAPES: list[Tape] = []
_GRAD_ENABLED = [True]


@contextlib.contextmanager
def recording(tape: Tape | None = None) -> Iterator[Tape]:
    """Record every op executed inside the block onto ``tape``."""
    tape = Tape() if tape is None else tape
    if tape.consumed:
        raise TapeError("tape already consumed; clear it before recording again")
    _ACTIVE_TAPES.append(tape)
    try:
        yield tape
    finally:
        _ACTIVE_TAPES.pop()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def _active_tape() -> Tape | None:
    if _ACTIVE_TAPES and _GRAD_ENABLED[-1]:
        return _ACTIVE_TAPES[-1]
    return None


# kind -> kernel(inputs: list[np.ndarray], attrs: dict, needs_grad: list[bool]) -> (out, backward_fn)
OPS: dict[str, Callable] = {}


def register(kind: str):
    def deco(fn):
        OPS[kind] = fn
        return fn
    return deco


def forward_op(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Run op ``kind`` on ``inputs`` and record it on the active tape."""
    try:
        kernel = OPS[kind]
    except KeyError:
        raise NumericsError(f"unknown op kind {kind!r}") from None
    attrs = {} if attrs is None else attrs
    inputs = tuple(t if isinstance(t, Tensor) else Tensor(t) for t in inputs)
    tape = _active_tape()
    needs = [tape is not None and t.requires_grad for t in inputs]
    out_data, backward_fn = kernel([t.data for t in inputs], attrs, needs)
    # a single non-finite element makes the sum non-finite
    if not np.isfinite(out_data.sum()):
        raise NonFiniteError(f"{kind} produced non-finite output")
    out = Tensor(out_data, requires_grad=any(needs))
    if out.requires_grad:
        tape.records.append(Record(kind, inputs, out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> dict[str, np.ndarray]:
    """Reverse-mode sweep over ``tape`` starting from the scalar ``loss``.

    Gradients are accumulated into ``Parameter.grad`` and also returned as a
    ``{parameter name: gradient}`` map. Non-parameter leaves that require a
    gradient get theirs in ``.grad`` too.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("tape already consumed")
    if not tape.records:
        raise TapeError("tape is empty")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(r.output) for r in tape.records}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.backward_fn(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise ShapeError(f"{rec.kind}: gradient shape {gi.shape} != input shape {t.shape}")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t
    # release saved activations
    tape.records.clear()

    out: dict[str, np.ndarray] = {}
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        if not np.isfinite(g).all():
            name = getattr(t, "name", "<leaf>")
            raise NonFiniteError(f"non-finite gradient for {name}")
        t.grad = g if t.grad is None else t.grad + g
        if isinstance(t, Parameter):
            out[t.name] = t.grad
    return out
