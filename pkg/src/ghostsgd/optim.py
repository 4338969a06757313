"""SGD as a time-homogeneous Markov chain on a compact parameter box.

One step is ``w ← clip(w − η g(w, ξ), −B, B)`` where ``g`` is the mean
per-sample gradient over the batch ``ξ``. Batch draws come from a
counter-based stream keyed by the step index, so a chain is reproducible
from ``(seed, config)`` alone and observers can never perturb it.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol, Sequence

import numpy as np

from .autodiff import ContractError
from .ghost import LossBreakdown
from .rng import fisher_yates, stream

log = logging.getLogger(__name__)

__all__ = [
    "Objective",
    "ModelObjective",
    "LandscapeObjective",
    "BatchSampler",
    "GradEstimate",
    "SgdState",
    "TrajectoryRecord",
    "NonFiniteGradient",
    "ObserverError",
    "grad_estimate",
    "sgd_step",
    "run_chain",
    "trajectory_hash",
]

DOMAIN_BOUND = 1e3


class Objective(Protocol):
    n_samples: int

    def value_and_grad(self, w: np.ndarray, batch: np.ndarray) -> tuple[LossBreakdown, np.ndarray]:
        ...


class ModelObjective:
    """Mean cross-entropy of a model over (a batch of) a fixed dataset."""

    def __init__(self, model, template, images: np.ndarray, labels: np.ndarray):
        if len(labels) == 0:
            raise ContractError("dataset is empty")
        self.model = model
        self.template = template
        self.images = images
        self.labels = labels
        self.n_samples = len(labels)

    def value_and_grad(self, w, batch):
        x, y = (self.images, self.labels) if batch is None else (self.images[batch], self.labels[batch])
        return self.model.value_and_grad(self.template.with_data(w), x, y)

    def full_grad(self, w: np.ndarray) -> np.ndarray:
        return self.value_and_grad(w, None)[1]


class LandscapeObjective:
    """Deterministic closed-form landscape seen as a one-sample dataset."""

    n_samples = 1

    def __init__(self, landscape):
        self.landscape = landscape

    def value_and_grad(self, w, batch):
        f, g, _ = self.landscape.evaluate(w)
        return LossBreakdown(f, f, 0.0), np.asarray(g, dtype=np.float64)

    def full_grad(self, w):
        return self.value_and_grad(w, None)[1]


MODES = ("full_batch", "with_replacement", "without_replacement_epoch")


@dataclass(frozen=True)
class BatchSampler:
    n: int
    batch_size: int | None = None
    mode: str = "full_batch"
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ContractError("dataset is empty")
        if self.mode not in MODES:
            raise ValueError(f"unknown sampler mode {self.mode!r}")
        if self.mode != "full_batch" and not (1 <= (self.batch_size or 0) <= self.n):
            raise ValueError(f"batch size must be in 1..{self.n}")

    def draw(self, step: int) -> np.ndarray | None:
        """Indices of batch ξ_step; ``None`` means the whole dataset."""
        if self.mode == "full_batch":
            return None
        m = self.batch_size
        if self.mode == "with_replacement":
            return stream(self.seed, "batch", step).integers(0, self.n, size=m)
        per_epoch = self.n // m  # a ragged tail is dropped each epoch
        epoch, pos = divmod(step, per_epoch)
        perm = fisher_yates(self.n, stream(self.seed, "epoch", epoch))
        return np.sort(perm[pos * m:(pos + 1) * m])


@dataclass(frozen=True)
class GradEstimate:
    g: np.ndarray
    batch: np.ndarray | None
    loss: LossBreakdown


def grad_estimate(w: np.ndarray, objective: Objective, sampler: BatchSampler, step: int = 0) -> GradEstimate:
    batch = sampler.draw(step)
    loss, g = objective.value_and_grad(w, batch)
    return GradEstimate(g, batch, loss)


class NonFiniteGradient(FloatingPointError):
    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass(frozen=True)
class SgdState:
    params: np.ndarray
    step: int = 0
    eta: float = 0.05
    seed: int = 0
    momentum: float = 0.0
    domain_bound: float = DOMAIN_BOUND
    projections: int = 0  # coordinates clamped so far

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"learning rate must be positive, got {self.eta}")
        if self.momentum != 0.0:
            raise ValueError("only plain SGD (momentum 0) is supported")


def _project(w: np.ndarray, bound: float) -> tuple[np.ndarray, int]:
    outside = int(np.count_nonzero(np.abs(w) > bound))
    if outside:
        w = np.clip(w, -bound, bound)
    return w, outside


def sgd_step(state: SgdState, objective: Objective, sampler: BatchSampler,
             estimate: GradEstimate | None = None) -> SgdState:
    est = estimate if estimate is not None else grad_estimate(state.params, objective, sampler, state.step)
    if not np.all(np.isfinite(est.g)):
        dump = {"step": state.step, "params_sha": _digest(state.params),
                "nonfinite": int(np.count_nonzero(~np.isfinite(est.g))), "loss": est.loss}
        log.error("non-finite gradient at step %d: %s", state.step, dump)
        raise NonFiniteGradient(f"non-finite gradient at step {state.step}", dump)
    w, clamped = _project(state.params - state.eta * est.g, state.domain_bound)
    return replace(state, params=w, step=state.step + 1, projections=state.projections + clamped)


@dataclass(frozen=True)
class TrajectoryRecord:
    step: int
    f_orig: float
    f_ghost: float
    grad_norm: float
    lyapunov_summand: float | None
    params_sha: str
    extras: dict = field(default_factory=dict, compare=False)


class ObserverError(RuntimeError):
    def __init__(self, message: str, records: list[TrajectoryRecord]):
        super().__init__(message)
        self.records = records


Observer = Callable[[int, np.ndarray, GradEstimate], "dict | None"]


def _digest(w: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(w).tobytes()).hexdigest()[:16]


def run_chain(state: SgdState, objective: Objective, sampler: BatchSampler, steps: int,
              observers: Sequence[Observer] = (), cadence: int = 1,
              flush: Callable[[list[TrajectoryRecord]], None] | None = None,
              ) -> tuple[SgdState, list[TrajectoryRecord]]:
    """Run ``steps`` SGD steps and return the final state and one record per step.

    Each record describes the iterate *before* its update. Observers are
    called every ``cadence`` steps (at steps t with (t+1) % cadence == 0)
    with a read-only view of the parameters; a returned dict is merged
    into the record (key ``lyapunov_summand`` fills that field).
    """
    if steps < 1:
        raise ContractError("run_chain needs at least one step")
    records: list[TrajectoryRecord] = []
    for _ in range(steps):
        t = state.step
        est = grad_estimate(state.params, objective, sampler, t)
        extras: dict = {}
        if observers and (t + 1) % cadence == 0:
            view = state.params.view()
            view.flags.writeable = False
            for obs in observers:
                try:
                    out = obs(t, view, est)
                except Exception as err:
                    if flush is not None:
                        flush(records)
                    raise ObserverError(f"observer failed at step {t}: {err}", records) from err
                if out:
                    extras.update(out)
        lyap = extras.pop("lyapunov_summand", None)
        records.append(TrajectoryRecord(t, est.loss.l_orig, est.loss.l_ghost,
                                        float(np.linalg.norm(est.g)), lyap,
                                        _digest(state.params), extras))
        state = sgd_step(state, objective, sampler, est)
    if flush is not None:
        flush(records)
    return state, records


def trajectory_hash(records: Sequence[TrajectoryRecord]) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(r.params_sha.encode())
    return h.hexdigest()
