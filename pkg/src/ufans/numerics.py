"""Dense tensors, a recording tape for reverse-mode differentiation, MSE loss and Adam.

Every op checks its result for NaN/Inf and raises :class:`NonFiniteError`
instead of letting bad values propagate.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_ids = itertools.count()


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


class Tensor:
    """Immutable-by-convention array with an identity used by the tape."""

    __slots__ = ("data", "requires_grad", "name", "id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


def tensor(data, dtype=DEFAULT_DTYPE, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


# ---------------------------------------------------------------------------
# tape


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable ops.

    Entries are appended as ops execute, so every input id precedes its consumer.
    """

    entries: list[TapeEntry] = field(default_factory=list)
    _tracked: set = field(default_factory=set)

    def __len__(self) -> int:
        return len(self.entries)

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or t.id in self._tracked

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward) -> None:
        self.entries.append(TapeEntry(op, tuple(inputs), output, backward))
        self._tracked.add(output.id)


_active: list[Tape] = []


@contextmanager
def recording(tape: Tape | None = None) -> Iterator[Tape]:
    tape = Tape() if tape is None else tape
    _active.append(tape)
    try:
        yield tape
    finally:
        _active.pop()


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward) -> Tensor:
    _check_finite(out, op)
    result = Tensor(out)
    if _active:
        tape = _active[-1]
        if any(tape.tracks(t) for t in inputs):
            tape.record(op, inputs, result, backward)
    return result


class Gradients:
    """Gradient store keyed by tensor; untouched tensors read as zeros."""

    def __init__(self, grads: dict[int, np.ndarray], visited: int):
        self._grads = grads
        self.visited = visited

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(t.id)
        return np.zeros_like(t.data) if g is None else g

    def __contains__(self, t: Tensor) -> bool:
        return t.id in self._grads


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Reverse sweep over ``tape`` from the scalar ``loss``.

    Only tensors created with ``requires_grad=True`` keep their gradient in
    the returned store; intermediate gradients are dropped as soon as used.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.id not in tape._tracked:
        raise ValueError("loss was not produced on this tape")
    pending: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    params: dict[int, np.ndarray] = {}
    visited = 0
    for entry in reversed(tape.entries):
        g = pending.pop(entry.output.id, None)
        if g is None:
            continue
        visited += 1
        for inp, gi in zip(entry.inputs, entry.backward(g)):
            if gi is None or not tape.tracks(inp):
                continue
            store = params if inp.requires_grad else pending
            if inp.id in store:
                store[inp.id] = store[inp.id] + gi
            else:
                store[inp.id] = gi
    return Gradients(params, visited)


# ---------------------------------------------------------------------------
# ops


def _unbroadcast_bias(g: np.ndarray, axis: int) -> np.ndarray:
    axis = axis % g.ndim
    return g.sum(axis=tuple(i for i in range(g.ndim) if i != axis))


def _bias_view(b: np.ndarray, ndim: int, axis: int) -> np.ndarray:
    shape = [1] * ndim
    shape[axis] = b.shape[0]
    return b.reshape(shape)


def _binary(a: Tensor, b: Tensor, op: str, axis: int):
    if a.shape == b.shape:
        return a.data, b.data, False
    if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[axis]:
        return a.data, _bias_view(b.data, a.ndim, axis % a.ndim), True
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are neither equal nor a channel bias on axis {axis}")


def add(a, b, axis: int = -1) -> Tensor:
    """Elementwise sum; ``b`` may also be a rank-1 bias along ``axis`` of ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    x, y, bcast = _binary(a, b, "add", axis)

    def back(g):
        return g, _unbroadcast_bias(g, axis) if bcast else g

    return _emit("add", (a, b), x + y, back)


def mul(a, b, axis: int = -1) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    x, y, bcast = _binary(a, b, "mul", axis)

    def back(g):
        gb = g * x
        return g * y, _unbroadcast_bias(gb, axis) if bcast else gb

    return _emit("mul", (a, b), x * y, back)


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", (a,), a.data * a.data.dtype.type(c), lambda g: (g * a.data.dtype.type(c),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a`` is (..., m, k), ``b`` is (k, n)."""
    if b.ndim != 2 or a.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    x, w = a.data, b.data

    def back(g):
        gw = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return g @ w.T, gw

    return _emit("matmul", (a, b), x @ w, back)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit("tanh", (x,), y, lambda g: (g * (1 - y * y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1 / (1 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _emit("sigmoid", (x,), y, lambda g: (g * y * (1 - y),))


def transpose_last(x: Tensor) -> Tensor:
    """Swap the two trailing axes, e.g. frames x dims <-> channels x frames."""
    return _emit("transpose", (x,), np.ascontiguousarray(np.swapaxes(x.data, -1, -2)),
                 lambda g: (np.swapaxes(g, -1, -2),))


def pad_frames(x: Tensor, right: int) -> Tensor:
    """Zero-pad the last axis on the right."""
    if right == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 1) + [(0, right)]
    n = x.shape[-1]
    return _emit("pad", (x,), np.pad(x.data, widths), lambda g: (g[..., :n],))


def crop_frames(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    axis = axis % x.ndim
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def back(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _emit("crop", (x,), np.ascontiguousarray(x.data[idx]), back)


def take_row(table: Tensor, i: int) -> Tensor:
    """Row ``i`` of a 2-D table as a rank-1 tensor (embedding lookup)."""
    if not 0 <= i < table.shape[0]:
        raise IndexError(f"row {i} out of range for table with {table.shape[0]} rows")

    def back(g):
        full = np.zeros_like(table.data)
        full[i] = g
        return (full,)

    return _emit("take_row", (table,), table.data[i].copy(), back)


def sum_scalars(terms: Sequence[Tensor]) -> Tensor:
    total = np.sum([t.data for t in terms], axis=0)
    return _emit("sum", tuple(terms), np.asarray(total), lambda g: tuple(g for _ in terms))


def mse_loss(pred: Tensor, target) -> Tensor:
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: pred shape {pred.shape} != target shape {target.shape}")
    diff = pred.data - target
    n = diff.size
    loss = np.asarray(np.mean(diff * diff), dtype=pred.dtype)
    return _emit("mse", (pred,), loss, lambda g: (g * (2 / n) * diff,))


def custom_op(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward) -> Tensor:
    """Hook for ops defined outside this module (layers)."""
    return _emit(op, inputs, out, backward)


# ---------------------------------------------------------------------------
# Adam


@dataclass(frozen=True)
class AdamState:
    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    t: int = 0
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls(tuple(np.zeros_like(p) for p in params), tuple(np.zeros_like(p) for p in params), 0, **hyper)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """One bias-corrected Adam update. Pure: returns ``(new_params, new_state)``."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeError("adam_step: params, grads and state lengths differ")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"adam_step: shapes {p.shape}, {g.shape}, {m.shape} disagree")
        if not np.isfinite(g).all():
            raise NonFiniteError("adam_step: non-finite gradient")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        dt = p.dtype.type
        m = dt(b1) * m + dt(1 - b1) * g
        v = dt(b2) * v + dt(1 - b2) * (g * g)
        step = dt(state.lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(state.eps))
        new_p.append(p - step)
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(tuple(new_m), tuple(new_v), t, state.lr, b1, b2, state.eps)
