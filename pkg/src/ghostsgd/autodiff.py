"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Operations are recorded on the active :class:`Tape` (entered with ``with``).
Nodes are appended in execution order, so the tape is already topologically
sorted and :func:`backward` is a single reverse sweep.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = tensor_sum(w)
    >>> backward(tape, loss)
    >>> w.grad
    array([1., 1.])
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ContractError",
    "DimensionError",
    "NonFiniteError",
    "Tensor",
    "Tape",
    "backward",
    "record",
    "matmul",
    "add",
    "mul",
    "scale",
    "add_bias",
    "tensor_sum",
    "reshape",
    "concat",
    "pad2d",
    "conv2d",
    "maxpool2",
    "pointwise",
    "POINTWISE_KINDS",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible with the operation."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class NonFiniteError(FloatingPointError):
    """A forward operation on finite inputs produced inf or NaN."""


class Tensor:
    """Dense float64 array that can participate in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


class Tape:
    """Append-only record of differentiable operations."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    @staticmethod
    def current() -> "Tape | None":
        stack = getattr(_local, "stack", None)
        return stack[-1] if stack else None

    def __len__(self) -> int:
        return len(self.nodes)


def _checked(op: str, data: np.ndarray) -> np.ndarray:
    # a finite sum is the cheap common case; otherwise inspect every element
    if not np.isfinite(data.sum()) and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: non-finite values in forward output")
    return data


def record(op: str, inputs: Sequence[Tensor], data: np.ndarray,
           vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and put it on the active tape.

    ``vjp`` maps the output cotangent to one cotangent per input (``None``
    for inputs that need no gradient).
    """
    out = Tensor(_checked(op, data))
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = Tape.current()
    if out.requires_grad and tape is not None:
        out.node = len(tape.nodes)
        tape.nodes.append(Node(op, tuple(inputs), out, vjp))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` of every tensor that ``loss`` depends on.

    Gradients accumulate additively, so leaves used on several branches
    receive the sum of their contributions. Call ``zero_grad`` on leaves
    before reusing them with a new tape.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None or loss.node >= len(tape.nodes) or tape.nodes[loss.node].output is not loss:
        raise ContractError("loss was not produced on this tape")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes[: loss.node + 1]):
        g = node.output.grad
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = np.array(gi, dtype=np.float64, copy=True)
            else:
                inp.grad = inp.grad + gi


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        return (g @ B.T if a.requires_grad else None,
                A.T @ g if b.requires_grad else None)

    return record("matmul", (a, b), A @ B, vjp)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return record("mul", (a, b), A * B, lambda g: (g * B, g * A))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return record("scale", (a,), a.data * factor, lambda g: (g * factor,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add ``b`` (shape ``(F,)``) along axis 1 of ``x`` (``(N, F)`` or ``(N, F, H, W)``)."""
    if b.data.ndim != 1 or x.data.ndim not in (2, 4) or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: cannot add {b.shape} to {x.shape}")
    expand = (slice(None),) + (None,) * (x.data.ndim - 2)
    bias = b.data[expand]
    axes = (0,) + tuple(range(2, x.data.ndim))

    def vjp(g):
        return g, g.sum(axis=axes)

    return record("add_bias", (x, b), x.data + bias, vjp)


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return record("sum", (x,), np.asarray(x.data.sum()),
                  lambda g: (np.broadcast_to(g, shape),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise DimensionError(f"reshape: cannot reshape {old} to {tuple(shape)}") from err
    return record("reshape", (x,), out, lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} on axis {axis}") from err
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return parts

    return record("concat", tensors, out, vjp)


# ---------------------------------------------------------------- convolutional ops

def pad2d(x: Tensor, bottom: int = 0, right: int = 0) -> Tensor:
    """Zero-pad the two trailing spatial axes on the bottom/right edges."""
    if x.data.ndim != 4:
        raise DimensionError(f"pad2d expects N×C×H×W, got {x.shape}")
    H, W = x.shape[2:]
    out = np.pad(x.data, ((0, 0), (0, 0), (0, bottom), (0, right)))
    return record("pad2d", (x,), out, lambda g: (g[:, :, :H, :W],))


def conv2d(x: Tensor, k: Tensor) -> Tensor:
    """Valid, stride-1 cross-correlation of ``x`` (N×C×H×W) with ``k`` (F×C×3×3)."""
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d operands, got {x.shape} and {k.shape}")
    N, C, H, W = x.shape
    F, Ck, kh, kw = k.shape
    if (kh, kw) != (3, 3) or Ck != C:
        raise DimensionError(f"conv2d: kernel {k.shape} does not match input {x.shape}")
    if H < 3 or W < 3:
        raise DimensionError(f"conv2d: spatial dims {H}×{W} are smaller than the 3×3 kernel")
    Ho, Wo = H - 2, W - 2
    # rows: (n, h, w); columns: (c, i, j)
    cols = (sliding_window_view(x.data, (3, 3), axis=(2, 3))
            .transpose(0, 2, 3, 1, 4, 5)
            .reshape(N * Ho * Wo, C * 9))
    kmat = k.data.reshape(F, C * 9)
    out = np.ascontiguousarray((cols @ kmat.T).reshape(N, Ho, Wo, F).transpose(0, 3, 1, 2))

    def vjp(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, F)
        gk = (gmat.T @ cols).reshape(F, C, 3, 3) if k.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gmat @ kmat).reshape(N, Ho, Wo, C, 3, 3)
            gx = np.zeros((N, H, W, C))
            for i in range(3):
                for j in range(3):
                    gx[:, i:i + Ho, j:j + Wo, :] += dcols[:, :, :, :, i, j]
            gx = gx.transpose(0, 3, 1, 2)
        return gx, gk

    return record("conv2d", (x, k), out, vjp)


def maxpool2(x: Tensor) -> Tensor:
    """2×2 max pooling with stride 2. Gradient goes to the first maximum in row-major order."""
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2 expects N×C×H×W, got {x.shape}")
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"maxpool2: spatial dims {H}×{W} must be even")
    X = x.data
    quads = (X[:, :, 0::2, 0::2], X[:, :, 0::2, 1::2], X[:, :, 1::2, 0::2], X[:, :, 1::2, 1::2])
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))

    def vjp(g):
        gx = np.zeros((N, C, H, W))
        taken = np.zeros(out.shape, dtype=bool)
        for q, (di, dj) in zip(quads, ((0, 0), (0, 1), (1, 0), (1, 1))):
            hit = (q == out) & ~taken
            taken |= hit
            gx[:, :, di::2, dj::2] = np.where(hit, g, 0.0)
        return (gx,)

    return record("maxpool2", (x,), out, vjp)


# ---------------------------------------------------------------- elementwise

def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


POINTWISE_KINDS = ("relu", "sigmoid", "tanh", "identity")


def pointwise(x: Tensor, kind: str) -> Tensor:
    X = x.data
    if kind == "identity":
        return record("identity", (x,), X, lambda g: (g,))
    if kind == "relu":
        return record("relu", (x,), np.maximum(X, 0.0), lambda g: (g * (X > 0),))
    if kind == "sigmoid":
        s = _sigmoid(X)
        return record("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))
    if kind == "tanh":
        t = np.tanh(X)
        return record("tanh", (x,), t, lambda g: (g * (1.0 - t * t),))
    raise ValueError(f"unknown pointwise kind {kind!r}; expected one of {POINTWISE_KINDS}")
