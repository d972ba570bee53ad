"""Dense tensors, parameters and the reverse-mode tape."""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, NamedTuple, Sequence

import numpy as np

from ..errors import ContractError, NonFiniteError

DEFAULT_DTYPE = np.float32

_TAPES: list["Tape"] = []
_CHECK_FINITE = True


def active_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


@contextmanager
def finite_checks(enabled: bool):
    """Temporarily toggle the NaN/Inf guard applied to every op result."""
    global _CHECK_FINITE
    prev, _CHECK_FINITE = _CHECK_FINITE, enabled
    try:
        yield
    finally:
        _CHECK_FINITE = prev


def _as_float_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(DEFAULT_DTYPE)


class Tensor:
    """An n-dimensional real array that can take part in a tape.

    Tensors are treated as immutable once produced by an op. ``grad`` is
    populated by :meth:`Tape.backward` for leaves that require gradients.
    """

    __slots__ = ("data", "grad", "requires_grad")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


class Parameter(Tensor):
    """A trainable leaf tensor with a zero-initialised gradient buffer."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def assign(self, value) -> None:
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ContractError(f"{self.name}: shape {value.shape} != {self.data.shape}")
        self.data = value
        if self.grad is None or self.grad.shape != value.shape:
            self.grad = np.zeros_like(value)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


class Record(NamedTuple):
    name: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of executed primitives, replayed in reverse by ``backward``.

    Usage::

        with Tape() as tape:
            loss = model_loss(...)
        tape.backward(loss)

    Ops executed while no tape is active are not recorded (inference mode).
    """

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, name, out, inputs, vjp) -> None:
        self.records.append(Record(name, out, tuple(inputs), vjp))

    def backward(self, loss: Tensor, visit: Callable[[str], None] | None = None) -> None:
        if not isinstance(loss, Tensor) or loss.size != 1:
            shape = getattr(loss, "shape", None)
            raise ContractError(f"backward needs a scalar loss, got shape {shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(r.out) for r in self.records}
        leaves: dict[int, Tensor] = {}
        if id(loss) not in produced and loss.requires_grad:
            leaves[id(loss)] = loss

        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            if visit is not None:
                visit(rec.name)
            for inp, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = inp

        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g

    def clear(self) -> None:
        self.records.clear()


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` of every leaf reachable from ``loss``."""
    tape.backward(loss)


def make_op(name: str, data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap a primitive's result and register it on the active tape."""
    if _CHECK_FINITE and not np.isfinite(data).all():
        raise NonFiniteError(f"{name} produced non-finite values")
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(name, out, inputs, vjp)
    return out
