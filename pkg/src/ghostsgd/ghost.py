"""Ghost-category extension of a softmax classifier head.

The head maps features ``ζ`` (batch × s) to ``c`` real logits plus ``e`` ghost
logits. Ghost classes never appear as labels; they only enlarge the softmax
denominator. Per sample the extended cross-entropy splits exactly as

    l_ext = l_orig + l_ghost,   l_ghost = log(1 + Σ_ghost e^z / Σ_real e^z) ≥ 0

and ``l_ghost`` does not depend on the label.

Labels are 0-based class indices in ``0 .. c-1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import (
    POINTWISE_KINDS,
    ContractError,
    DimensionError,
    Tensor,
    add_bias,
    matmul,
    pointwise,
    record,
)

__all__ = [
    "GhostHeadConfig",
    "LossBreakdown",
    "head_forward",
    "ghost_softmax_ce",
    "ghost_softmax_ce_grad",
    "ghost_softmax_ce_grad_literal",
    "ghost_ce_loss",
    "embed_original",
    "parse_gamma_init",
    "ghost_init_arrays",
    "gradient_coincidence_gap",
]


@dataclass(frozen=True)
class GhostHeadConfig:
    c: int
    e: int
    s: int
    u: np.ndarray = field(repr=False)  # s × (c+e); columns c.. are the ghost parameters
    b: np.ndarray = field(repr=False)  # (c+e,)
    activation: str = "identity"

    def __post_init__(self):
        if self.c < 1 or self.e < 0 or self.s < 1:
            raise ValueError(f"invalid head sizes c={self.c}, e={self.e}, s={self.s}")
        if self.activation not in POINTWISE_KINDS:
            raise ValueError(f"unknown activation {self.activation!r}")
        u = np.asarray(self.u, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if u.shape != (self.s, self.c + self.e) or b.shape != (self.c + self.e,):
            raise DimensionError(
                f"head weights {u.shape} / biases {b.shape} do not match "
                f"s={self.s}, c+e={self.c + self.e}")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "b", b)

    @classmethod
    def zeros(cls, c: int, e: int, s: int, activation: str = "identity") -> "GhostHeadConfig":
        return cls(c, e, s, np.zeros((s, c + e)), np.zeros(c + e), activation)

    @property
    def gamma(self) -> tuple[np.ndarray, np.ndarray]:
        """Ghost weight columns and ghost biases."""
        return self.u[:, self.c:], self.b[self.c:]

    def original(self) -> "GhostHeadConfig":
        """The same head with the ghost columns dropped (e = 0)."""
        return replace(self, e=0, u=self.u[:, :self.c], b=self.b[:self.c])


@dataclass(frozen=True)
class LossBreakdown:
    """Batch-mean losses in nats, with optional per-sample arrays."""

    l_ext: float
    l_orig: float
    l_ghost: float
    per_sample: dict | None = field(default=None, repr=False, compare=False)


def head_forward(features: Tensor, cfg: GhostHeadConfig) -> Tensor:
    """Logits ``z_i = σ(Σ_j u_{j,i} ζ_j + b_i)`` for all ``c + e`` outputs."""
    if features.data.ndim != 2 or features.shape[1] != cfg.s:
        raise DimensionError(f"head expects batch×{cfg.s} features, got {features.shape}")
    z = add_bias(matmul(features, Tensor(cfg.u)), Tensor(cfg.b))
    return pointwise(z, cfg.activation)


def _check(logits: np.ndarray, labels, c: int, e: int) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    if z.ndim != 2 or z.shape[1] != c + e:
        raise DimensionError(f"expected batch×{c + e} logits, got {np.shape(logits)}")
    y = np.atleast_1d(np.asarray(labels))
    if y.shape != (z.shape[0],):
        raise DimensionError(f"{y.shape[0]} labels for {z.shape[0]} logit rows")
    if not np.issubdtype(y.dtype, np.integer):
        raise ContractError("labels must be integers")
    if np.any(y < 0) or np.any(y >= c):
        raise ContractError(f"labels must lie in 0..{c - 1} (never a ghost index)")
    if not np.all(np.isfinite(z)):
        raise ContractError("logits must be finite")
    return z, y


def _lse(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1)
    return m + np.log(np.exp(z - m[:, None]).sum(axis=1))


def ghost_softmax_ce(logits, labels, c: int, e: int) -> LossBreakdown:
    z, y = _check(logits, labels, c, e)
    rows = np.arange(len(y))
    lse_real = _lse(z[:, :c])
    lse_all = _lse(z)
    zy = z[rows, y]
    l_ext = lse_all - zy
    l_orig = lse_real - zy
    if e:
        # log(1 + Σ_gh/Σ_real) = softplus(lse_ghost - lse_real), ratio kept in log space
        l_ghost = np.logaddexp(0.0, _lse(z[:, c:]) - lse_real)
    else:
        l_ghost = np.zeros_like(l_orig)
    per = {"l_ext": l_ext, "l_orig": l_orig, "l_ghost": l_ghost}
    return LossBreakdown(float(l_ext.mean()), float(l_orig.mean()), float(l_ghost.mean()), per)


def _softmax(z: np.ndarray) -> np.ndarray:
    p = np.exp(z - z.max(axis=1, keepdims=True))
    return p / p.sum(axis=1, keepdims=True)


def ghost_softmax_ce_grad(logits, labels, c: int, e: int, check: bool = False) -> np.ndarray:
    """Gradient of the batch-mean ``l_ext`` with respect to the logits: ``(ŷ - ỹ) / batch``.

    With ``check=True`` the term-by-term quotient form is evaluated as well and
    the two are required to agree.
    """
    z, y = _check(logits, labels, c, e)
    grad = _softmax(z)
    grad[np.arange(len(y)), y] -= 1.0
    grad /= len(y)
    if check:
        literal = ghost_softmax_ce_grad_literal(z, y, c, e)
        if not np.allclose(grad, literal, rtol=1e-9, atol=1e-15):
            raise AssertionError("closed-form and quotient-form ghost gradients disagree")
    return grad


def ghost_softmax_ce_grad_literal(logits, labels, c: int, e: int) -> np.ndarray:
    """Quotient form of the same gradient, written per output index.

    Real index i:  ((Σ_{j≠i} y_j) e^{z_i} - y_i Σ_{j≠i} e^{z_j}) / Σ_j e^{z_j}
    Ghost index i: (Σ_{j≤c} y_j) e^{z_i} / Σ_j e^{z_j}

    where y is one-hot over the real classes and zero on ghosts. All
    exponentials share one max shift, which cancels in each quotient.
    """
    z, y = _check(logits, labels, c, e)
    n, k = z.shape
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0
    ez = np.exp(z - z.max(axis=1, keepdims=True))
    total = ez.sum(axis=1)
    ysum_all = onehot.sum(axis=1)
    ysum_real = onehot[:, :c].sum(axis=1)
    out = np.empty_like(z)
    for i in range(k):
        if i < c:
            y_others = ysum_all - onehot[:, i]
            ez_others = total - ez[:, i]
            out[:, i] = (y_others * ez[:, i] - onehot[:, i] * ez_others) / total
        else:
            out[:, i] = ysum_real * ez[:, i] / total
    return out / n


def ghost_ce_loss(logits: Tensor, labels, c: int, e: int, part: str = "ext") -> Tensor:
    """Batch-mean cross-entropy as a single tape node.

    ``part="ext"`` differentiates the extended loss; ``part="orig"`` uses the
    real columns only (zero gradient on ghost logits), i.e. the loss of the
    e = 0 model evaluated on the same logits.
    """
    z, y = _check(logits.data, labels, c, e)
    n = len(y)
    br = ghost_softmax_ce(z, y, c, e)
    if part == "ext":
        value, cols = br.l_ext, slice(None)
    elif part == "orig":
        value, cols = br.l_orig, slice(0, c)
    else:
        raise ValueError(f"part must be 'ext' or 'orig', got {part!r}")

    def vjp(g):
        grad = np.zeros_like(z)
        p = _softmax(z[:, cols])
        p[np.arange(n), y] -= 1.0
        grad[:, cols] = p / n
        return (grad * g,)

    out = record(f"ghost_ce_{part}", (logits,), np.asarray(value), vjp)
    return out


def parse_gamma_init(spec: str) -> tuple[str, float]:
    """``"zeros"``, ``"gaussian:0.01"`` or ``"frozen:30"`` → (kind, parameter)."""
    kind, _, arg = spec.partition(":")
    kind = kind.strip().lower().replace("-", "_")
    if kind == "zeros":
        return "zeros", 0.0
    if kind in ("gaussian", "small_gaussian"):
        return "gaussian", float(arg) if arg else 0.01
    if kind in ("frozen", "frozen_at"):
        return "frozen", float(arg) if arg else 30.0
    raise ValueError(f"unknown gamma_init {spec!r}")


def ghost_init_arrays(s: int, e: int, gamma_init: str, rng: np.random.Generator | None = None):
    """Ghost weight columns (s × e) and biases (e,) for an initialisation rule.

    ``frozen:M`` gives zero weights and biases ``-M``, i.e. ghost logits
    pinned at ``-M``.
    """
    kind, arg = parse_gamma_init(gamma_init)
    if kind == "zeros":
        return np.zeros((s, e)), np.zeros(e)
    if kind == "gaussian":
        if rng is None:
            raise ValueError("gaussian gamma_init needs a generator")
        return rng.normal(0.0, arg, size=(s, e)), np.zeros(e)
    return np.zeros((s, e)), np.full(e, -arg)


def embed_original(original: GhostHeadConfig, e_new: int, gamma_init: str = "zeros",
                   rng: np.random.Generator | None = None) -> GhostHeadConfig:
    """Extend an e = 0 head with ``e_new`` ghost columns; real columns are copied unchanged."""
    if original.e != 0:
        raise ContractError(f"embed_original expects an e=0 head, got e={original.e}")
    if e_new < 0:
        raise ContractError("e_new must be non-negative")
    gu, gb = ghost_init_arrays(original.s, e_new, gamma_init, rng)
    return GhostHeadConfig(
        original.c, e_new, original.s,
        np.concatenate([original.u, gu], axis=1),
        np.concatenate([original.b, gb]),
        original.activation,
    )


def gradient_coincidence_gap(model, params, x, y) -> float:
    """Largest absolute difference between the extended-model and original-model
    gradients over the shared (non-ghost) parameters.

    ``model`` is a :class:`ghostsgd.models.Model`; the original model is its
    e = 0 restriction with the same backbone and real head columns.
    """
    _, g_ext = model.value_and_grad(params, x, y, part="ext")
    base = model.original()
    _, g_orig = base.value_and_grad(model.restrict(params), x, y, part="ext")
    shared = g_ext[params.mask(ghost=False)]
    return float(np.max(np.abs(shared - g_orig)))
