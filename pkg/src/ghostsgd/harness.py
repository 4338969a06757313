"""Paired baseline-vs-ghost RMNIST studies: config files, runs, CSV/JSON output."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import POINTWISE_KINDS, NonFiniteError
from .data import Dataset, load_mnist, rmnist_sample, take
from .ghost import parse_gamma_init
from .diagnostics import NORM_NAME, ErgodicAccumulator, LyapunovObserver, SpectralProbe, first_peak
from .models import ModelSpec, build
from .optim import BatchSampler, ModelObjective, NonFiniteGradient, SgdState, run_chain

log = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "dump_config",
    "RunResult",
    "run_single",
    "run_study",
    "summarize",
    "emit_csv",
    "parse_csv",
    "CSV_COLUMNS",
    "write_study",
    "PUBLISHED_SHIFT",
]

PUBLISHED_SHIFT = 4.8  # published mean peak shift, for side-by-side reporting only
ARMS = ("baseline", "ghost")
CSV_COLUMNS = ("run_id", "arm", "epoch", "train_loss", "test_loss", "test_acc", "gamma_hat", "f_ghost_mean")


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines a study. Seeds of run r are ``seed + r``."""

    dataset: str = "mnist"
    per_class: int = 30
    test_size: int = 0  # 0 = full test split, otherwise its first test_size images
    seed: int = 0
    runs: int = 30
    model: str = "cnn2block"
    channels: tuple[int, ...] = (8, 16)
    hidden: tuple[int, ...] = (32,)
    activation: str = "identity"
    gamma_init: str = "zeros"
    ghosts: int = 2
    eta: float = 0.05
    epochs: int = 200
    batch_mode: str = "full_batch"
    batch_size: int = 0
    momentum: float = 0.0
    domain_bound: float = 1e3
    lyapunov_every: int = 10  # steps between Hessian probes; 0 disables γ̂
    lyapunov_max_iter: int = 100
    lyapunov_solver: str = "auto"
    smooth_window: int = 1
    workers: int = 1
    out_dir: str = "runs/study"

    def __post_init__(self):
        checks = [
            (self.dataset == "mnist", "dataset must be 'mnist'"),
            (self.per_class >= 1, "per_class must be >= 1"),
            (self.test_size >= 0, "test_size must be >= 0"),
            (self.runs >= 1, "runs must be >= 1"),
            (self.model in ("cnn2block", "mlp"), "model must be cnn2block or mlp"),
            (self.ghosts >= 1, "ghosts must be >= 1 (the baseline arm always uses 0)"),
            (self.eta > 0, "eta must be positive"),
            (self.epochs >= 3, "epochs must be >= 3 for peak detection"),
            (self.momentum == 0.0, "only momentum 0 is supported"),
            (self.domain_bound > 0, "domain_bound must be positive"),
            (self.lyapunov_every >= 0, "lyapunov_every must be >= 0"),
            (self.lyapunov_solver in ("auto", "lanczos", "power"), "lyapunov_solver must be auto, lanczos or power"),
            (self.smooth_window >= 1 and self.smooth_window % 2 == 1, "smooth_window must be odd and >= 1"),
            (self.workers >= 1, "workers must be >= 1"),
        ]
        checks.append((self.activation in POINTWISE_KINDS, f"activation must be one of {', '.join(POINTWISE_KINDS)}"))
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        try:
            parse_gamma_init(self.gamma_init)
        except ValueError as err:
            raise ConfigError(f"gamma_init: {err}") from None
        try:
            BatchSampler(self.per_class * 10, self.batch_size or None, self.batch_mode)
        except ValueError as err:
            raise ConfigError(str(err)) from None

    @property
    def steps_per_epoch(self) -> int:
        if self.batch_mode == "full_batch":
            return 1
        return max(1, (self.per_class * 10) // self.batch_size)

    def model_spec(self, ghosts: int, init_seed: int) -> ModelSpec:
        return ModelSpec(kind=self.model, channels=self.channels, hidden=self.hidden, e=ghosts,
                         activation=self.activation, gamma_init=self.gamma_init, init_seed=init_seed)


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _convert(key: str, raw: str):
    default = _FIELDS[key].default
    try:
        if isinstance(default, tuple):
            return _ints(raw)
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config(text: str) -> ExperimentConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment. Unset keys keep defaults."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw.strip())
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: ExperimentConfig) -> str:
    """Every key with its effective value, in a stable order."""
    lines = [f"# ghostsgd {__version__} materialized config"]
    for name in _FIELDS:
        v = getattr(cfg, name)
        if isinstance(v, tuple):
            v = ",".join(map(str, v))
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{name} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- single runs

@dataclass
class RunResult:
    run_id: int
    arm: str
    seed: int
    ghosts: int
    train_loss: list[float]
    test_loss: list[float]
    test_acc: list[float]
    gamma_hat: list[float]
    f_ghost_mean: list[float]
    init: dict = field(default_factory=dict)  # metrics at the shared initial point
    peak_epoch: int | None = None
    f_ghost_quarters: tuple[float, float] = (math.nan, math.nan)
    projections: int = 0
    spectral_unconverged: int = 0
    trajectory_sha: str = ""
    failed: str | None = None
    wall_time: float = 0.0

    def rows(self):
        for i in range(len(self.train_loss)):
            yield (self.run_id, self.arm, i + 1, self.train_loss[i], self.test_loss[i],
                   self.test_acc[i], self.gamma_hat[i], self.f_ghost_mean[i])


def _test_set(cfg: ExperimentConfig, data_dir) -> Dataset:
    test = load_mnist("test", data_dir)
    if cfg.test_size:
        test = take(test, np.arange(min(cfg.test_size, len(test))))
    return test.as_float()


def run_single(cfg: ExperimentConfig, run_id: int, arm: str, train: Dataset, test: Dataset) -> RunResult:
    """Train one arm of one paired run. Epoch rows are 1-based; row k holds
    the mean training loss over epoch k and the test metrics after it."""
    seed = cfg.seed + run_id
    ghosts = 0 if arm == "baseline" else cfg.ghosts
    model, params = build(cfg.model_spec(ghosts, seed))
    objective = ModelObjective(model, params, train.images, train.labels)
    sampler = BatchSampler(len(train), cfg.batch_size or None, cfg.batch_mode, seed)
    state = SgdState(params.data.copy(), eta=cfg.eta, seed=seed, domain_bound=cfg.domain_bound)
    observers = []
    if cfg.lyapunov_every:
        probe = SpectralProbe(solver=cfg.lyapunov_solver, max_iter=cfg.lyapunov_max_iter, seed=seed)
        observers.append(LyapunovObserver(objective.full_grad, cfg.eta, probe))
    res = RunResult(run_id, arm, seed, ghosts, [], [], [], [], [])
    t0 = time.perf_counter()
    br, acc = model.evaluate(params, test.images, test.labels)
    init_train = model.evaluate(params, train.images, train.labels)[0]
    res.init = {"train_loss": init_train.l_ext, "train_loss_orig": init_train.l_orig,
                "test_loss": br.l_ext, "test_loss_orig": br.l_orig, "test_acc": acc}
    acc_obs = ErgodicAccumulator(max(cfg.lyapunov_every, 1))
    f_ghost_steps: list[float] = []
    digests = []
    try:
        for _ in range(cfg.epochs):
            state, records = run_chain(state, objective, sampler, cfg.steps_per_epoch,
                                       observers, cadence=max(cfg.lyapunov_every, 1))
            for r in records:
                acc_obs.add_record(r)
                f_ghost_steps.append(r.f_ghost)
                digests.append(r.params_sha)
            br, acc = model.evaluate(params.with_data(state.params), test.images, test.labels)
            if not math.isfinite(br.l_ext):
                raise NonFiniteError("non-finite test loss")
            res.train_loss.append(float(np.mean([r.f_orig + r.f_ghost for r in records])))
            res.test_loss.append(br.l_ext)
            res.test_acc.append(acc)
            res.gamma_hat.append(acc_obs.lyapunov_sum / acc_obs.lyapunov_count
                                 if acc_obs.lyapunov_count else math.nan)
            res.f_ghost_mean.append(acc_obs.mean("f_ghost"))
    except (NonFiniteGradient, NonFiniteError, FloatingPointError) as err:
        res.failed = f"{type(err).__name__}: {err}"
        log.warning("run %d (%s) flagged: %s", run_id, arm, res.failed)
    res.wall_time = time.perf_counter() - t0
    res.projections = state.projections
    res.spectral_unconverged = sum(o.unconverged for o in observers)
    res.trajectory_sha = hashlib.sha256("".join(digests).encode()).hexdigest()
    if res.failed is None:
        res.peak_epoch = _peak(res.test_loss, cfg.smooth_window)
        q = max(1, len(f_ghost_steps) // 4)
        res.f_ghost_quarters = (float(np.mean(f_ghost_steps[:q])), float(np.mean(f_ghost_steps[-q:])))
    return res


def _peak(series, window) -> int | None:
    t = first_peak(series, window)
    return None if t is None else t + 1  # series index → 1-based epoch


def _run_pair(args):
    cfg, run_id, data_dir = args
    train = load_mnist("train", data_dir)
    test = _test_set(cfg, data_dir)
    sub = rmnist_sample(train, cfg.per_class, cfg.seed + run_id)
    return [run_single(cfg, run_id, arm, sub, test) for arm in ARMS], sub.provenance


def run_study(cfg: ExperimentConfig, data_dir=None, progress=None) -> tuple[list[RunResult], dict]:
    """Train both arms for every run. Returns results sorted by (run, arm) and data provenance."""
    jobs = [(cfg, r, data_dir) for r in range(cfg.runs)]
    # fail fast with the fetch hint before spawning workers
    load_mnist("test", data_dir)
    results: list[RunResult] = []
    provenance = {}
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            outputs = list(pool.map(_run_pair, jobs))
    else:
        outputs = []
        for job in jobs:
            outputs.append(_run_pair(job))
            if progress:
                progress(job[1], outputs[-1][0])
    for (pair, prov), job in zip(outputs, jobs):
        results.extend(pair)
        provenance[job[1]] = {k: v for k, v in prov.items() if k != "indices"}
    return results, provenance


# ---------------------------------------------------------------- summary

def _band(series: list[list[float]]) -> dict:
    if not series:
        return {"mean": [], "sd": []}
    a = np.asarray(series)
    sd = a.std(axis=0, ddof=1) if len(a) > 1 else np.zeros(a.shape[1])
    return {"mean": a.mean(axis=0).tolist(), "sd": sd.tolist()}


def summarize(cfg: ExperimentConfig, results: list[RunResult], provenance: dict | None = None) -> dict:
    by_run: dict[int, dict[str, RunResult]] = {}
    for r in results:
        by_run.setdefault(r.run_id, {})[r.arm] = r
    flagged = sorted({r.run_id for r in results if r.failed})
    ok = [rid for rid in sorted(by_run) if rid not in flagged and len(by_run[rid]) == 2]
    shifts, undetected = [], []
    init_ok = True
    per_run = []
    for rid in sorted(by_run):
        b, g = by_run[rid].get("baseline"), by_run[rid].get("ghost")
        entry = {"run_id": rid, "seed": cfg.seed + rid,
                 "peak_baseline": b.peak_epoch if b else None,
                 "peak_ghost": g.peak_epoch if g else None,
                 "failed": {a: r.failed for a, r in by_run[rid].items() if r.failed}}
        if b and g:
            entry["init_test_loss"] = {"baseline": b.init["test_loss"], "ghost": g.init["test_loss"]}
            init_ok &= g.init["test_loss"] >= b.init["test_loss"]
        if g and not g.failed:
            first, last = g.f_ghost_quarters
            entry["f_ghost_first_quarter"] = first
            entry["f_ghost_last_quarter"] = last
            entry["f_ghost_ratio"] = last / first if first > 0 else math.nan
        if rid in ok:
            if b.peak_epoch is not None and g.peak_epoch is not None:
                entry["shift"] = b.peak_epoch - g.peak_epoch
                shifts.append(entry["shift"])
            else:
                undetected.append(rid)
        per_run.append(entry)
    ghost_ratios = [e["f_ghost_ratio"] for e in per_run if "f_ghost_ratio" in e]
    shift_arr = np.asarray(shifts, dtype=np.float64)
    summary = {
        "version": __version__,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()
                   if k not in ("workers", "out_dir")},
        "runs": cfg.runs,
        "runs_used": len(ok),
        "flagged_runs": flagged,
        "undetected_peak_runs": undetected,
        "paired_shift_mean": float(shift_arr.mean()) if shifts else None,
        "paired_shift_sd": float(shift_arr.std(ddof=1)) if len(shifts) > 1 else None,
        "paired_shift_n": len(shifts),
        "published_shift": PUBLISHED_SHIFT,
        "shift_positive": bool(shifts) and float(shift_arr.mean()) > 0,
        "init_ghost_test_loss_ge_baseline": bool(init_ok),
        "f_ghost_ratio_max": max(ghost_ratios) if ghost_ratios else None,
        "f_ghost_decay_ok": bool(ghost_ratios) and all(r < 0.1 for r in ghost_ratios),
        "projections_total": int(sum(r.projections for r in results)),
        "spectral_unconverged_total": int(sum(r.spectral_unconverged for r in results)),
        "band": {arm: _band([r.test_loss for r in results if r.arm == arm and r.run_id in ok])
                 for arm in ARMS},
        "band_sd": "sample (ddof=1)",
        "lyapunov": {
            "norm": NORM_NAME,
            "probe_every_steps": cfg.lyapunov_every,
            "estimator": "mean of log-norms over probed steps" if cfg.lyapunov_every else "disabled",
        },
        "epoch_convention": "row k: mean train loss over epoch k, test metrics after epoch k; init stored separately",
        "trajectory_sha": {f"{r.run_id}/{r.arm}": r.trajectory_sha for r in results},
        "per_run": per_run,
    }
    if provenance:
        summary["data"] = {str(k): v for k, v in sorted(provenance.items())}
    return summary


# ---------------------------------------------------------------- persistence

def _fmt(v) -> str:
    if isinstance(v, float):
        return "%.17g" % v
    return str(v)


def emit_csv(results: list[RunResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in results:
        for row in r.rows():
            w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def parse_csv(text: str) -> list[RunResult]:
    """Rebuild the per-epoch series of each (run, arm) from :func:`emit_csv` output."""
    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader, ()))
    if header != CSV_COLUMNS:
        raise ValueError(f"unexpected CSV header {header}")
    out: dict[tuple[int, str], RunResult] = {}
    for row in reader:
        rid, arm = int(row[0]), row[1]
        r = out.setdefault((rid, arm), RunResult(rid, arm, 0, 0, [], [], [], [], []))
        vals = [float(v) for v in row[3:]]
        for series, v in zip((r.train_loss, r.test_loss, r.test_acc, r.gamma_hat, r.f_ghost_mean), vals):
            series.append(v)
    return list(out.values())


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def write_study(out_dir, cfg: ExperimentConfig, results: list[RunResult], summary: dict,
                plots: bool = True) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "config": out / "config.conf",
        "csv": out / "runs.csv",
        "summary": out / "summary.json",
        "timing": out / "timing.json",
    }
    paths["config"].write_text(dump_config(cfg))
    paths["csv"].write_text(emit_csv(results))
    paths["summary"].write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True, allow_nan=False) + "\n")
    # wall times vary between runs, so they live apart from the deterministic outputs
    timing = {f"{r.run_id}/{r.arm}": round(r.wall_time, 3) for r in results}
    paths["timing"].write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
    if plots:
        from .svg import emit_plots
        for name, p in emit_plots(summary, results, out / "plots").items():
            paths[name] = p
    return paths
