"""Barrier-bypass certificates on a 2-D ridge landscape.

A certificate is a sampled path ``(w(t), γ(t))`` in the extended space. It
is valid when the extended loss ``f_ext = f_orig(w) + f_ghost(γ)`` never
rises by more than the tolerance between consecutive samples, and the
original loss ends more than ``ε`` below where it started. ``ε`` is the
barrier height that a descent path in ``w`` alone would have to climb.

The ghost contribution of a single ghost logit ``γ`` sitting against a real
log-sum-exp of zero is ``softplus(γ) = log(1 + e^γ)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Ridge2D

__all__ = [
    "PathCertificate",
    "CertificateReport",
    "ghost_loss",
    "ghost_level",
    "verify_path_certificate",
    "bypass_path",
]


def ghost_loss(gamma) -> np.ndarray:
    return np.logaddexp(0.0, np.asarray(gamma, dtype=np.float64))


def ghost_level(target) -> np.ndarray:
    """Inverse of :func:`ghost_loss`: the γ with softplus(γ) = target > 0."""
    target = np.asarray(target, dtype=np.float64)
    if np.any(target <= 0):
        raise ValueError("ghost loss levels must be positive")
    # log(e^x - 1) written to stay accurate for small and large x
    return target + np.log(-np.expm1(-target))


@dataclass(frozen=True)
class PathCertificate:
    t: np.ndarray
    w: np.ndarray  # samples × 2
    gamma: np.ndarray
    f_orig: np.ndarray
    f_ghost: np.ndarray
    epsilon: float
    tolerance: float = 1e-9
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def f_ext(self) -> np.ndarray:
        return self.f_orig + self.f_ghost

    @classmethod
    def from_path(cls, landscape, t, w, gamma, epsilon: float, tolerance: float = 1e-9, **meta):
        w = np.asarray(w, dtype=np.float64)
        f_orig = np.array([landscape.evaluate(p)[0] for p in w])
        return cls(np.asarray(t, dtype=np.float64), w, np.asarray(gamma, dtype=np.float64),
                   f_orig, ghost_loss(gamma), float(epsilon), tolerance, meta)


@dataclass(frozen=True)
class CertificateReport:
    valid: bool
    monotone: bool
    drop: float  # f_orig(start) - f_orig(end)
    first_violation: int | None  # sample index where f_ext first rises
    max_rise: float
    message: str


def verify_path_certificate(cert: PathCertificate) -> CertificateReport:
    n = len(cert.t)
    if n < 10:
        raise ValueError(f"a certificate needs at least 10 path samples, got {n}")
    f_ext = cert.f_ext
    if not np.all(np.isfinite(f_ext)):
        bad = int(np.flatnonzero(~np.isfinite(f_ext))[0])
        return CertificateReport(False, False, math.nan, bad, math.inf,
                                 f"non-finite f_ext at sample {bad}")
    rises = np.diff(f_ext)
    over = np.flatnonzero(rises > cert.tolerance)
    first = int(over[0]) + 1 if over.size else None
    drop = float(cert.f_orig[0] - cert.f_orig[-1])
    dropped = drop > cert.epsilon
    msgs = []
    if first is not None:
        msgs.append(f"f_ext rises by {rises[first - 1]:.3e} at sample {first} (t={cert.t[first]:.6g})")
    if not dropped:
        msgs.append(f"f_orig drop {drop:.6g} does not exceed epsilon {cert.epsilon:.6g}")
    valid = first is None and dropped
    return CertificateReport(valid, first is None, drop, first, float(max(rises.max(), 0.0)),
                             "; ".join(msgs) if msgs else "ok")


def bypass_path(landscape: Ridge2D = Ridge2D(), samples: int = 201, gamma0: float = 2.0,
                descent: float = 0.1, gamma_end: float = -30.0, epsilon: float = 0.55,
                tolerance: float = 1e-9) -> PathCertificate:
    """A lateral corridor from the shallow well at (-1, 0) to the deep well at (1, 0).

    First leg: w₁ moves linearly from -1 to 1 while γ is solved from
    ``f_ghost(γ) = F(t) - f_orig(w(t))`` with ``F`` decreasing linearly by
    ``descent``, so the ghost coordinate pays for the ridge. Second leg:
    w stays put and γ is lowered to ``gamma_end``, draining the ghost loss.
    """
    if samples < 10:
        raise ValueError("need at least 10 samples")
    first = samples // 2 + 1
    second = samples - first
    s = np.linspace(0.0, 1.0, first)
    w = np.column_stack([-1.0 + 2.0 * s, np.zeros(first)])
    f_w = np.array([landscape.evaluate(p)[0] for p in w])
    start = f_w[0] + float(ghost_loss(gamma0))
    budget = start - descent * s - f_w
    if budget.min() <= 0:
        raise ValueError("ghost budget too small to clear the ridge")
    gamma1 = ghost_level(budget)
    gamma1[0] = gamma0
    g_leg = np.linspace(gamma1[-1], gamma_end, second + 1)[1:]
    t = np.concatenate([0.5 * s, 0.5 + 0.5 * np.linspace(0.0, 1.0, second + 1)[1:]])
    w_all = np.vstack([w, np.repeat(w[-1:], second, axis=0)])
    gamma = np.concatenate([gamma1, g_leg])
    return PathCertificate.from_path(landscape, t, w_all, gamma, epsilon, tolerance,
                                     gamma0=gamma0, descent=descent)
