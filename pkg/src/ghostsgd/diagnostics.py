"""Ergodic averages, the running Lyapunov estimate and test-loss peak detection.

The running estimate is

    γ̂_N = mean over probed steps of log ‖I − η ∇²f(w_t)‖₂

with the operator 2-norm. The Hessian is only touched through
Hessian-vector products (central differences of the gradient, or an exact
matrix for closed-form landscapes). Probes run every ``k`` steps, so γ̂ is
a subsampled mean over the chain.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .autodiff import ContractError
from .rng import stream

__all__ = [
    "hvp",
    "SpectralProbe",
    "SpectralEstimate",
    "spectral_norm_shifted",
    "ErgodicAccumulator",
    "ErgodicMeans",
    "lyapunov_running",
    "ergodic_means",
    "MeasureSketch",
    "measure_stability",
    "first_peak",
    "smooth",
    "LyapunovObserver",
]

NORM_NAME = "spectral (operator 2-norm)"

GradFn = Callable[[np.ndarray], np.ndarray]


def hvp(grad_fn: GradFn, w: np.ndarray, v: np.ndarray) -> np.ndarray:
    """∇²f(w)·v by a central difference of gradients along v/‖v‖."""
    w = np.asarray(w, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nv = float(np.linalg.norm(v))
    if nv == 0.0:
        raise ContractError("hvp direction must be non-zero")
    vhat = v / nv
    eps = 1e-5 * (1.0 + float(np.max(np.abs(w), initial=0.0)))
    return (grad_fn(w + eps * vhat) - grad_fn(w - eps * vhat)) / (2.0 * eps) * nv


@dataclass(frozen=True)
class SpectralProbe:
    """How to estimate ‖I − ηH‖₂.

    ``solver="power"`` is plain power iteration on the shifted operator;
    ``solver="lanczos"`` runs Lanczos with full reorthogonalisation, which
    needs far fewer products on exact operators but is fragile when the
    Hessian products are noisy finite differences. ``"auto"`` picks Lanczos
    for exact Hessians and power iteration otherwise.
    """

    hvp_method: str = "finite_difference"  # or "exact_quadratic"
    solver: str = "auto"
    max_iter: int = 100
    tol: float = 1e-8
    seed: int = 0


@dataclass(frozen=True)
class SpectralEstimate:
    value: float
    converged: bool
    iterations: int
    solver: str


def _operator(probe: SpectralProbe, grad_fn, w, eta, hessian):
    if probe.hvp_method == "exact_quadratic":
        if hessian is None:
            raise ContractError("exact_quadratic needs the Hessian matrix")
        H = np.asarray(hessian, dtype=np.float64)
        return lambda v: v - eta * (H @ v)
    if probe.hvp_method != "finite_difference":
        raise ValueError(f"unknown hvp method {probe.hvp_method!r}")
    return lambda v: v - eta * hvp(grad_fn, w, v)


def spectral_norm_shifted(probe: SpectralProbe, grad_fn: GradFn | None, w: np.ndarray, eta: float,
                          hessian: np.ndarray | None = None) -> SpectralEstimate:
    """Largest |eigenvalue| of the symmetric operator v ↦ v − η ∇²f(w) v."""
    if eta < 0:
        raise ContractError("learning rate must be non-negative")
    w = np.atleast_1d(np.asarray(w, dtype=np.float64))
    if eta == 0:
        return SpectralEstimate(1.0, True, 0, probe.solver)
    op = _operator(probe, grad_fn, w, eta, hessian)
    start = stream(probe.seed, "spectral-start").standard_normal(w.size)
    start /= np.linalg.norm(start)
    solver = probe.solver
    if solver == "auto":
        solver = "lanczos" if probe.hvp_method == "exact_quadratic" else "power"
    if solver == "power":
        return _power(op, start, probe)
    if solver == "lanczos":
        return _lanczos(op, start, probe)
    raise ValueError(f"unknown solver {probe.solver!r}")


def _power(op, v, probe: SpectralProbe) -> SpectralEstimate:
    theta = prev = math.nan
    for it in range(1, probe.max_iter + 1):
        av = op(v)
        theta = float(v @ av)
        norm = float(np.linalg.norm(av))
        if norm == 0.0:
            return SpectralEstimate(0.0, True, it, "power")
        if abs(theta - prev) <= probe.tol * max(1.0, abs(theta)):
            return SpectralEstimate(abs(theta), True, it, "power")
        prev = theta
        v = av / norm
    return SpectralEstimate(abs(theta), False, probe.max_iter, "power")


def _lanczos(op, q, probe: SpectralProbe) -> SpectralEstimate:
    n = q.size
    m = min(probe.max_iter, n)
    Q = np.zeros((m + 1, n))
    Q[0] = q
    alphas: list[float] = []
    betas: list[float] = []
    prev = math.nan
    for k in range(m):
        z = op(Q[k])
        alphas.append(float(Q[k] @ z))
        basis = Q[:k + 1]
        for _ in range(2):
            z = z - basis.T @ (basis @ z)
        beta = float(np.linalg.norm(z))
        ritz, vecs = eigh_tridiagonal(np.array(alphas), np.array(betas))
        j = int(np.argmax(np.abs(ritz)))
        best = float(abs(ritz[j]))
        scale = max(1.0, best)
        if beta <= 1e-12 * scale or k + 1 == m or abs(best - prev) <= probe.tol * scale:
            return _certify(op, basis.T @ vecs[:, j], probe, k + 1)
        prev = best
        betas.append(beta)
        Q[k + 1] = z / beta
    raise AssertionError("unreachable")


def _certify(op, x, probe: SpectralProbe, iterations: int) -> SpectralEstimate:
    """Re-evaluate a Ritz vector with one real operator application.

    Finite-difference Hessian products are only approximately linear (a
    difference step can straddle a ReLU kink), and Lanczos amplifies such
    errors. The reported value is the Rayleigh quotient of the returned
    vector; it counts as converged only if its residual is small.
    """
    x = x / np.linalg.norm(x)
    ax = op(x)
    rq = float(x @ ax)
    residual = float(np.linalg.norm(ax - rq * x))
    ok = residual <= math.sqrt(probe.tol) * max(1.0, abs(rq))
    return SpectralEstimate(abs(rq), ok, iterations + 1, "lanczos")


# ---------------------------------------------------------------- ergodic averages

class _Sum:
    """Neumaier-compensated running sum."""

    __slots__ = ("total", "comp")

    def __init__(self):
        self.total = 0.0
        self.comp = 0.0

    def add(self, x: float) -> None:
        t = self.total + x
        if abs(self.total) >= abs(x):
            self.comp += (self.total - t) + x
        else:
            self.comp += (x - t) + self.total
        self.total = t

    @property
    def value(self) -> float:
        return self.total + self.comp


@dataclass(frozen=True)
class ErgodicMeans:
    f_orig: float
    f_ghost: float
    grad_norm: float
    count: int


class ErgodicAccumulator:
    """Running sums of per-step observables along one chain."""

    def __init__(self, cadence: int = 10):
        if cadence < 1:
            raise ValueError("cadence must be >= 1")
        self.cadence = cadence
        self.count = 0
        self._sums = {"f_orig": _Sum(), "f_ghost": _Sum(), "grad_norm": _Sum()}
        self._lyap = _Sum()
        self.lyapunov_count = 0

    def add(self, f_orig: float, f_ghost: float = 0.0, grad_norm: float = 0.0) -> None:
        self.count += 1
        self._sums["f_orig"].add(float(f_orig))
        self._sums["f_ghost"].add(float(f_ghost))
        self._sums["grad_norm"].add(float(grad_norm))

    def add_many(self, f_orig, f_ghost=None, grad_norm=None) -> None:
        f_orig = np.asarray(f_orig, dtype=np.float64)
        n = f_orig.size
        cols = {"f_orig": f_orig,
                "f_ghost": np.zeros(n) if f_ghost is None else np.asarray(f_ghost, dtype=np.float64),
                "grad_norm": np.zeros(n) if grad_norm is None else np.asarray(grad_norm, dtype=np.float64)}
        for key, col in cols.items():
            self._sums[key].add(math.fsum(col))
        self.count += n

    def add_lyapunov(self, log_norm: float) -> None:
        self._lyap.add(float(log_norm))
        self.lyapunov_count += 1

    def add_record(self, rec) -> None:
        self.add(rec.f_orig, rec.f_ghost, rec.grad_norm)
        if rec.lyapunov_summand is not None:
            self.add_lyapunov(rec.lyapunov_summand)

    def mean(self, key: str) -> float:
        return self._sums[key].value / self.count

    @property
    def lyapunov_sum(self) -> float:
        return self._lyap.value


def ergodic_means(acc: ErgodicAccumulator) -> ErgodicMeans:
    if acc.count < 1:
        raise ContractError("no steps recorded")
    return ErgodicMeans(acc.mean("f_orig"), acc.mean("f_ghost"), acc.mean("grad_norm"), acc.count)


def lyapunov_running(acc: ErgodicAccumulator) -> float:
    """Mean recorded log-norm; negative values indicate contraction."""
    if acc.lyapunov_count == 0:
        raise ContractError("no Hessian probes recorded")
    return acc.lyapunov_sum / acc.lyapunov_count


class LyapunovObserver:
    """Chain observer that records log ‖I − ηH(w_t)‖₂ using the full-data gradient."""

    def __init__(self, grad_fn: GradFn, eta: float, probe: SpectralProbe = SpectralProbe()):
        self.grad_fn = grad_fn
        self.eta = eta
        self.probe = probe
        self.unconverged = 0

    def __call__(self, step, w, estimate):
        est = spectral_norm_shifted(self.probe, self.grad_fn, np.array(w), self.eta)
        self.unconverged += not est.converged
        return {"lyapunov_summand": math.log(est.value), "spectral_converged": est.converged}


# ---------------------------------------------------------------- empirical measure

@dataclass
class MeasureSketch:
    """2-D random projection of the iterates, compared first half vs second half."""

    dim: int
    seed: int = 0
    bins: int = 64
    points: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        p = stream(self.seed, "measure-sketch").standard_normal((2, self.dim))
        self.projections = p / np.linalg.norm(p, axis=1, keepdims=True)

    def record(self, w) -> None:
        self.points.append(self.projections @ np.atleast_1d(np.asarray(w, dtype=np.float64)))

    def record_many(self, ws) -> None:
        ws = np.asarray(ws, dtype=np.float64).reshape(-1, self.dim)
        self.points.extend(ws @ self.projections.T)

    def __len__(self) -> int:
        return len(self.points)

    def histograms(self) -> tuple[np.ndarray, np.ndarray]:
        """Counts for each half over mean ± 3σ per axis; outliers go to the edge bins."""
        pts = np.asarray(self.points)
        edges = []
        for axis in range(2):
            m, s = pts[:, axis].mean(), pts[:, axis].std()
            half = 3.0 * s if s > 0 else 0.5
            edges.append(np.linspace(m - half, m + half, self.bins + 1))
        clipped = np.column_stack([np.clip(pts[:, a], edges[a][0], edges[a][-1]) for a in range(2)])
        mid = len(pts) // 2
        h1, _, _ = np.histogram2d(clipped[:mid, 0], clipped[:mid, 1], bins=edges)
        h2, _, _ = np.histogram2d(clipped[mid:, 0], clipped[mid:, 1], bins=edges)
        return h1, h2


def measure_stability(sketch: MeasureSketch) -> float:
    """Total-variation distance between the two half-trajectory histograms."""
    if len(sketch) < 2000:
        raise ContractError(f"need at least 2000 recorded steps, got {len(sketch)}")
    h1, h2 = sketch.histograms()
    return float(0.5 * np.abs(h1 / h1.sum() - h2 / h2.sum()).sum())


# ---------------------------------------------------------------- peak detection

def smooth(series: Sequence[float], window: int = 1) -> np.ndarray:
    """Centred moving average; the window shrinks symmetrically at the ends."""
    s = np.asarray(series, dtype=np.float64)
    if window < 1 or window % 2 == 0:
        raise ValueError("smoothing window must be a positive odd integer")
    if window == 1:
        return s.copy()
    half = window // 2
    out = np.empty_like(s)
    for t in range(len(s)):
        r = min(half, t, len(s) - 1 - t)
        out[t] = s[t - r:t + r + 1].mean()
    return out


def first_peak(series: Sequence[float], smooth_window: int = 1) -> int | None:
    """Smallest t ≥ 1 with s[t] > s[t−1] and s[t] ≥ s[t+1], or ``None``."""
    if len(series) < 3:
        raise ContractError("first_peak needs at least 3 values")
    s = smooth(series, smooth_window)
    for t in range(1, len(s) - 1):
        if s[t] > s[t - 1] and s[t] >= s[t + 1]:
            return t
    return None
