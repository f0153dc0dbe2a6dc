"""Rank-4 tensors with tape-based reverse-mode differentiation.

Every value in the library is an ``(N, C, H, W)`` array; vectors and
matrices ride along as ``(N, C, 1, 1)``.  Operations whose inputs require
gradients append a node to the current thread's :class:`GradTape`;
:func:`backward` walks that tape once in reverse and then retires it.
"""

from __future__ import annotations

import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

STANDARD = np.float32
HIGH = np.float64
_DTYPES = (np.dtype(STANDARD), np.dtype(HIGH))

MAGIC = b"RBT1"


class TapeError(RuntimeError):
    """Raised on misuse of the gradient tape (non-scalar loss, reuse)."""


class Tensor:
    """A dense ``(N, C, H, W)`` array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(STANDARD if dtype is None else dtype)
        if arr.ndim != 4:
            raise ValueError(f"tensors are rank 4 (N,C,H,W); got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"all dimensions must be positive; got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: int | None = None
        self._tape: GradTape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr)
        t.requires_grad = False
        t.grad = None
        t._node = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    parents: tuple[int, ...] = field(default=())


class GradTape:
    """Append-only record of differentiable operations, consumed by one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)


class _State(threading.local):
    def __init__(self):
        self.tape = GradTape()
        self.recording = True


_state = _State()


def current_tape() -> GradTape:
    return _state.tape


def reset_tape() -> GradTape:
    """Discard whatever is recorded on this thread and start a fresh tape."""
    _state.tape = GradTape()
    return _state.tape


@contextmanager
def no_grad():
    """Run operations without recording them."""
    prev = _state.recording
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


def is_recording() -> bool:
    return _state.recording


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``out`` as a tensor and, when needed, append a tape node for it.

    ``backward`` maps the output gradient to one gradient (or ``None``) per
    entry of ``inputs``.  Non-finite outputs from finite inputs are rejected.
    """
    if not np.isfinite(out).all():
        raise FloatingPointError(f"{op}: non-finite values in output")
    t = Tensor._wrap(out)
    if _state.recording and any(x.requires_grad for x in inputs):
        tape = _state.tape
        if tape.consumed:
            tape = reset_tape()
        parents = tuple(x._node for x in inputs if x._node is not None and x._tape is tape)
        tape.nodes.append(_Node(op, tuple(inputs), backward, parents))
        t.requires_grad = True
        t._node = len(tape.nodes) - 1
        t._tape = tape
    return t


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Returns a map from each leaf that received a gradient to that gradient.
    The tape that produced ``loss`` is retired afterwards.
    """
    if loss.shape != (1, 1, 1, 1):
        raise TapeError(f"backward needs a scalar (1,1,1,1) loss, got {loss.shape}")
    tape = loss._tape
    if tape is None or loss._node is None:
        raise TapeError("loss was not recorded on any tape (nothing requires grad?)")
    if tape.consumed:
        raise TapeError("this tape was already consumed by a previous backward pass")

    grads: dict[int, np.ndarray] = {loss._node: np.ones_like(loss.data)}
    leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
    for idx in range(loss._node, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        node = tape.nodes[idx]
        for x, gx in zip(node.inputs, node.backward(g)):
            if gx is None or not x.requires_grad:
                continue
            if x._node is not None and x._tape is tape:
                if x._node in grads:
                    grads[x._node] = grads[x._node] + gx
                else:
                    grads[x._node] = gx
            else:
                key = id(x)
                if key in leaves:
                    leaves[key] = (x, leaves[key][1] + gx)
                else:
                    leaves[key] = (x, gx)

    tape.consumed = True
    tape.nodes.clear()
    if _state.tape is tape:
        reset_tape()

    result = {}
    for x, gx in leaves.values():
        gx = np.asarray(gx, dtype=x.dtype).reshape(x.shape)
        x.grad = gx.copy() if x.grad is None else x.grad + gx
        result[x] = gx
    return result


# ------------------------------------------------------------------ elementwise


def _as_operand(a: Tensor, b) -> tuple[Tensor | None, np.ndarray, str]:
    """Classify ``b`` as same-shape, per-channel, or scalar relative to ``a``."""
    if isinstance(b, Tensor):
        if b.shape == a.shape:
            return b, b.data, "full"
        if b.shape == (1, a.shape[1], 1, 1):
            return b, b.data, "channel"
        if b.shape == (1, 1, 1, 1):
            return b, b.data, "scalar"
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape} (need equal, (1,C,1,1) or scalar)")
    if np.ndim(b) == 0:
        return None, np.asarray(b, dtype=a.dtype), "const"
    raise ValueError("second operand must be a Tensor or a Python/numpy scalar")


def _reduce_to(g: np.ndarray, form: str) -> np.ndarray:
    if form == "full":
        return g
    if form == "channel":
        return g.sum(axis=(0, 2, 3), keepdims=True)
    return g.sum().reshape(1, 1, 1, 1)


def _binary(op: str, a: Tensor, b, fwd, da, db) -> Tensor:
    if not isinstance(a, Tensor):
        raise TypeError("first operand must be a Tensor")
    bt, bd, form = _as_operand(a, b)
    with np.errstate(over="ignore", invalid="ignore"):  # record() reports non-finite results
        out = fwd(a.data, bd).astype(a.dtype, copy=False)
    inputs = (a,) if bt is None else (a, bt)

    def back(g):
        ga = da(g, a.data, bd)
        if bt is None:
            return (ga,)
        return ga, _reduce_to(db(g, a.data, bd), form)

    return record(op, out, inputs, back)


def add(a: Tensor, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a: Tensor, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a: Tensor, b) -> Tensor:
    return _binary(
        "mul",
        a,
        b,
        np.multiply,
        lambda g, x, y: g * y,
        lambda g, x, y: g * x,
    )


def scale(a: Tensor, s: float) -> Tensor:
    if s == 1.0:
        out = a.data.copy()
    else:
        out = a.data * a.dtype.type(s)
    return record("scale", out, (a,), lambda g: (g * s,))


def elementwise(op: str, a: Tensor, b) -> Tensor:
    """Dispatch ``op`` in {add, sub, mul, scale}."""
    table = {"add": add, "sub": sub, "mul": mul}
    if op == "scale":
        return scale(a, float(b))
    try:
        return table[op](a, b)
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None


# ------------------------------------------------------------------ reductions


def tensor_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype).reshape(1, 1, 1, 1)
    shape = x.shape
    return record("sum", out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def tensor_mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.dtype).reshape(1, 1, 1, 1)
    shape = x.shape
    return record("mean", out, (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def square(x: Tensor) -> Tensor:
    return mul(x, x)


# ------------------------------------------------------------------ construction


def zeros_like(x: Tensor) -> Tensor:
    return Tensor._wrap(np.zeros_like(x.data))


def parameter(arr: np.ndarray, dtype=STANDARD) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


# ------------------------------------------------------------------ serialization


def to_bytes(x: Tensor | np.ndarray) -> bytes:
    """``RBT1`` + four little-endian u64 dims + little-endian scalar payload.

    The payload scalar width follows the tensor precision (4 or 8 bytes);
    readers infer it from the payload length.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim != 4:
        raise ValueError("only rank-4 arrays serialize")
    if arr.dtype not in _DTYPES:
        arr = arr.astype(STANDARD)
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    return MAGIC + struct.pack("<4Q", *arr.shape) + np.ascontiguousarray(le).tobytes()


def from_bytes(buf: bytes, requires_grad: bool = False) -> Tensor:
    if buf[:4] != MAGIC:
        raise ValueError("not an RBT1 tensor (bad magic)")
    shape = struct.unpack("<4Q", buf[4:36])
    count = int(np.prod(shape))
    payload = buf[36:]
    if count == 0 or len(payload) not in (4 * count, 8 * count):
        raise ValueError(f"payload of {len(payload)} bytes does not match shape {shape}")
    dt = "<f4" if len(payload) == 4 * count else "<f8"
    arr = np.frombuffer(payload, dtype=dt).reshape(shape).astype(STANDARD if dt == "<f4" else HIGH)
    return Tensor(arr, requires_grad=requires_grad)


def save(path, x: Tensor) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(x))


def load(path, requires_grad: bool = False) -> Tensor:
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), requires_grad=requires_grad)
