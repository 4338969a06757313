"""Reference classifiers ending in a ghost-extended head.

``cnn2block``: two (conv 3×3 → relu → maxpool 2×2) blocks, flatten, head.
A block whose input has an odd spatial size is zero-padded on the
bottom/right edge first, so 28×28 runs 28→26→13, pad 14→12→6.

``mlp``: dense relu layers (default one of width 32) followed by the head.

All parameters live in one flat float64 vector (:class:`ParamVector`) with a
named segment index. Ghost columns of the head are separate segments
(``ghost.u``, ``ghost.b``) so they can be dropped or initialised on their own.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .ghost import ghost_ce_loss, ghost_init_arrays, ghost_softmax_ce, LossBreakdown
from .rng import stream

__all__ = [
    "SpecError",
    "Segment",
    "ParamVector",
    "ModelSpec",
    "Model",
    "build",
    "flatten_params",
    "unflatten_params",
]

GHOST_SEGMENTS = ("ghost.u", "ghost.b")


class SpecError(ValueError):
    """The model specification cannot be realised."""


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple[int, ...]
    ghost: bool = False

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


@dataclass
class ParamVector:
    """Flat parameter array plus the segment index that names its pieces."""

    data: np.ndarray
    segments: tuple[Segment, ...]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        total = sum(s.size for s in self.segments)
        if self.data.ndim != 1 or self.data.size != total:
            raise ContractError(
                f"parameter vector of length {self.data.size} does not match "
                f"segment index total {total}")

    def __len__(self) -> int:
        return self.data.size

    def segment(self, name: str) -> Segment:
        for s in self.segments:
            if s.name == name:
                return s
        raise KeyError(name)

    def view(self, name: str) -> np.ndarray:
        s = self.segment(name)
        return self.data[s.offset:s.offset + s.size].reshape(s.shape)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.segments]

    def mask(self, ghost: bool) -> np.ndarray:
        m = np.zeros(self.data.size, dtype=bool)
        for s in self.segments:
            if s.ghost == ghost:
                m[s.offset:s.offset + s.size] = True
        return m

    def with_data(self, data: np.ndarray) -> "ParamVector":
        return ParamVector(data, self.segments)

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), self.segments)

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.data).tobytes()).hexdigest()[:16]


def flatten_params(arrays: dict[str, np.ndarray], ghost_names: Sequence[str] = GHOST_SEGMENTS) -> ParamVector:
    segments, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        seg = Segment(name, offset, arr.shape, name in ghost_names)
        segments.append(seg)
        chunks.append(arr.ravel())
        offset += seg.size
    data = np.concatenate(chunks) if chunks else np.zeros(0)
    return ParamVector(data, tuple(segments))


def unflatten_params(pv: ParamVector) -> dict[str, np.ndarray]:
    return {s.name: pv.view(s.name).copy() for s in pv.segments}


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "cnn2block"
    in_shape: tuple[int, int, int] = (1, 28, 28)
    channels: tuple[int, ...] = (8, 16)
    hidden: tuple[int, ...] = (32,)
    c: int = 10
    e: int = 0
    activation: str = "identity"
    gamma_init: str = "zeros"
    init_seed: int = 0

    def with_ghosts(self, e: int) -> "ModelSpec":
        return ModelSpec(self.kind, self.in_shape, self.channels, self.hidden, self.c, e,
                         self.activation, self.gamma_init, self.init_seed)


def _cnn_dims(in_shape, channels) -> tuple[list[tuple[int, int, int]], int]:
    """Per block: (pad, conv_out, pool_out) for one spatial axis; and the flat feature count."""
    C, H, W = in_shape
    if H != W:
        raise SpecError(f"cnn2block expects square inputs, got {H}×{W}")
    if len(channels) != 2:
        raise SpecError(f"cnn2block has exactly two blocks, got channels {channels}")
    plan, size = [], H
    for _ in channels:
        pad = size % 2
        conv = size + pad - 2
        if conv < 2:
            raise SpecError(f"spatial size {size} is too small for a conv+pool block")
        plan.append((pad, conv, conv // 2))
        size = conv // 2
    return plan, channels[-1] * size * size


@dataclass
class Model:
    """Forward/gradient machinery for a fixed :class:`ModelSpec`."""

    spec: ModelSpec
    template: ParamVector = field(repr=False)
    features: int = 0
    plan: list = field(default_factory=list, repr=False)

    @property
    def c(self) -> int:
        return self.spec.c

    @property
    def e(self) -> int:
        return self.spec.e

    # ------------------------------------------------------------ forward
    def _tensors(self, params: ParamVector, requires_grad: bool) -> dict[str, Tensor]:
        if params.segments != self.template.segments:
            raise ContractError("parameter vector layout does not belong to this model")
        return {s.name: Tensor(params.view(s.name), requires_grad=requires_grad)
                for s in params.segments}

    def _logits(self, t: dict[str, Tensor], x: np.ndarray) -> Tensor:
        spec = self.spec
        h = Tensor(x)
        if spec.kind == "cnn2block":
            if h.data.ndim != 4 or h.shape[1:] != spec.in_shape:
                raise ad.DimensionError(f"expected N×{spec.in_shape} images, got {h.shape}")
            for i, (pad, _, _) in enumerate(self.plan, start=1):
                if pad:
                    h = ad.pad2d(h, bottom=pad, right=pad)
                h = ad.conv2d(h, t[f"conv{i}.k"])
                h = ad.add_bias(h, t[f"conv{i}.b"])
                h = ad.pointwise(h, "relu")
                h = ad.maxpool2(h)
            h = ad.reshape(h, (h.shape[0], self.features))
        else:
            h = ad.reshape(h, (h.shape[0], int(np.prod(spec.in_shape))))
            for i in range(len(spec.hidden)):
                h = ad.pointwise(ad.add_bias(ad.matmul(h, t[f"dense{i}.w"]), t[f"dense{i}.b"]), "relu")
        u, b = t["head.u"], t["head.b"]
        if spec.e:
            u = ad.concat([u, t["ghost.u"]], axis=1)
            b = ad.concat([b, t["ghost.b"]], axis=0)
        return ad.pointwise(ad.add_bias(ad.matmul(h, u), b), spec.activation)

    def logits(self, params: ParamVector, x: np.ndarray) -> np.ndarray:
        return self._logits(self._tensors(params, False), x).data

    def value_and_grad(self, params: ParamVector, x: np.ndarray, y: np.ndarray,
                       part: str = "ext") -> tuple[LossBreakdown, np.ndarray]:
        """Batch-mean loss breakdown and the flat gradient of the chosen loss part."""
        t = self._tensors(params, True)
        with ad.Tape() as tape:
            z = self._logits(t, x)
            loss = ghost_ce_loss(z, y, self.c, self.e, part=part)
        ad.backward(tape, loss)
        grad = np.empty_like(params.data)
        for s in params.segments:
            g = t[s.name].grad
            grad[s.offset:s.offset + s.size] = 0.0 if g is None else g.ravel()
        return ghost_softmax_ce(z.data, y, self.c, self.e), grad

    def evaluate(self, params: ParamVector, x: np.ndarray, y: np.ndarray,
                 chunk: int = 1000) -> tuple[LossBreakdown, float]:
        """Loss breakdown and real-class accuracy, in chunks, without a tape."""
        sums = np.zeros(3)
        correct = 0
        for lo in range(0, len(y), chunk):
            z = self.logits(params, x[lo:lo + chunk])
            yb = y[lo:lo + chunk]
            br = ghost_softmax_ce(z, yb, self.c, self.e)
            n = len(yb)
            sums += n * np.array([br.l_ext, br.l_orig, br.l_ghost])
            correct += int((z[:, :self.c].argmax(axis=1) == yb).sum())
        sums /= len(y)
        return LossBreakdown(*map(float, sums)), correct / len(y)

    # ------------------------------------------------------------ ghost views
    def original(self) -> "Model":
        """The e = 0 model sharing this model's backbone and real head columns."""
        return build(self.spec.with_ghosts(0))[0]

    def restrict(self, params: ParamVector) -> ParamVector:
        """Drop the ghost segments from ``params`` (layout of :meth:`original`)."""
        keep = params.mask(ghost=False)
        return self.original().template.with_data(params.data[keep].copy())


def _layout(spec: ModelSpec) -> tuple[dict[str, tuple[tuple[int, ...], float, str]], int, list]:
    """Segment name → (shape, init bound, kind); plus feature count and cnn plan."""
    shapes: dict[str, tuple[tuple[int, ...], float, str]] = {}
    plan: list = []
    if spec.kind == "cnn2block":
        plan, s = _cnn_dims(spec.in_shape, spec.channels)
        cin = spec.in_shape[0]
        for i, cout in enumerate(spec.channels, start=1):
            fan_in = cin * 9
            shapes[f"conv{i}.k"] = ((cout, cin, 3, 3), np.sqrt(6.0 / fan_in), "uniform")
            shapes[f"conv{i}.b"] = ((cout,), 0.0, "zeros")
            cin = cout
    elif spec.kind == "mlp":
        width = int(np.prod(spec.in_shape))
        for i, h in enumerate(spec.hidden):
            shapes[f"dense{i}.w"] = ((width, h), np.sqrt(6.0 / width), "uniform")
            shapes[f"dense{i}.b"] = ((h,), 0.0, "zeros")
            width = h
        s = width
    else:
        raise SpecError(f"unknown model kind {spec.kind!r}")
    shapes["head.u"] = ((s, spec.c), np.sqrt(3.0 / s), "uniform")
    shapes["head.b"] = ((spec.c,), 0.0, "zeros")
    if spec.e:
        shapes["ghost.u"] = ((s, spec.e), 0.0, "ghost")
        shapes["ghost.b"] = ((spec.e,), 0.0, "ghost")
    return shapes, s, plan


def build(spec: ModelSpec) -> tuple[Model, ParamVector]:
    """Deterministically initialise a model from ``spec.init_seed``.

    Each segment draws from its own named stream, so adding ghost columns
    never changes the values of the shared parameters.
    """
    if spec.c < 1 or spec.e < 0:
        raise SpecError(f"invalid class counts c={spec.c}, e={spec.e}")
    shapes, s, plan = _layout(spec)
    arrays: dict[str, np.ndarray] = {}
    ghost = None
    for name, (shape, bound, kind) in shapes.items():
        if kind == "uniform":
            arrays[name] = stream(spec.init_seed, f"init/{name}").uniform(-bound, bound, size=shape)
        elif kind == "zeros":
            arrays[name] = np.zeros(shape)
        else:
            if ghost is None:
                ghost = ghost_init_arrays(s, spec.e, spec.gamma_init,
                                          stream(spec.init_seed, "init/ghost"))
            arrays[name] = ghost[0] if name == "ghost.u" else ghost[1]
    params = flatten_params(arrays)
    model = Model(spec, params.with_data(np.zeros(len(params))), s, plan)
    return model, params
