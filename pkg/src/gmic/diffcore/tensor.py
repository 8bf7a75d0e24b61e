"""Tensor and tape: the reverse-mode core.

A ``Tape`` is opened as a context manager; every op whose inputs require
gradient appends one record to the innermost active tape. ``Tape.backward``
walks the records in reverse and is single-use.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

STANDARD = "standard"
CHECK = "check"
_DTYPES = {STANDARD: np.float32, CHECK: np.float64}

# finiteness check after every op; the trainer may disable it for speed
CHECK_FINITE = True


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


def dtype_for(precision: str):
    try:
        return _DTYPES[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}") from None


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 precision: str | None = None):
        if precision is not None:
            arr = np.asarray(data, dtype=dtype_for(precision))
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float32)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"empty tensor shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def precision(self) -> str:
        return CHECK if self.data.dtype == np.float64 else STANDARD

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, precision={self.precision}{tag})"

    # operator sugar; implementations live in ops
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
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class _Record:
    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op, out, inputs, backward):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> "Tape | None":
    s = _stack()
    return s[-1] if s else None


class Tape:
    def __init__(self):
        self.records: list[_Record] = []
        self._done = False

    def __enter__(self) -> "Tape":
        if self._done:
            raise TapeError("tape already consumed")
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        s = _stack()
        if not s or s[-1] is not self:
            raise TapeError("tape stack corrupted")
        s.pop()
        return False

    def __len__(self):
        return len(self.records)

    def record(self, op: str, out: Tensor, inputs: Sequence[Tensor], backward: BackwardFn):
        if self._done:
            raise TapeError("cannot record onto a consumed tape")
        self.records.append(_Record(op, out, tuple(inputs), backward))

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Gradients of scalar ``loss``.

        Returns a dict keyed by tensor identity. With ``wrt`` given, every
        listed tensor gets an entry (zeros if unreachable); otherwise every
        leaf that received gradient is returned.
        """
        if self._done:
            raise TapeError("backward already called on this tape")
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        self._done = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        produced = {id(r.out) for r in self.records}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise ShapeError(f"{rec.op}: gradient shape {gi.shape} != input {t.shape}")
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    holders[key] = t
        out: dict[Tensor, np.ndarray] = {}
        if wrt is None:
            for key, g in grads.items():
                if key not in produced:
                    out[holders[key]] = g
            return out
        for t in wrt:
            g = grads.get(id(t))
            out[t] = g if g is not None else np.zeros_like(t.data)
        return out


def make_result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap an op result and record it if any input needs gradient."""
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: non-finite values in output")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape = active_tape()
        if tape is not None:
            tape.record(op, out, inputs, backward)
        else:
            out.requires_grad = False
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))
