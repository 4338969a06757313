"""Command line entry point: ``ghostsgd study|data|diag|demo|selftest``.

Exit codes: 0 success, 1 validation failure, 2 I/O problem or bad usage.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import DatasetNotFound, resolve_data_dir

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2

log = logging.getLogger("ghostsgd")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ghostsgd", description="Ghost-category SGD toolkit")
    p.add_argument("--version", action="version", version=f"ghostsgd {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    study = sub.add_parser("study", help="paired baseline/ghost studies").add_subparsers(dest="action", required=True)
    run = study.add_parser("run", help="train every run of a config and write CSV/JSON/SVG")
    run.add_argument("config", type=Path)
    run.add_argument("--out", type=Path, help="output directory (overrides out_dir)")
    run.add_argument("--data-dir", type=Path, help="MNIST directory (else $GHOSTSGD_DATA_DIR)")
    run.add_argument("--workers", type=int, help="parallel runs (overrides workers)")
    run.add_argument("--no-plots", action="store_true")
    plot = study.add_parser("plot", help="re-emit SVG plots for a finished study directory")
    plot.add_argument("dir", type=Path)

    data = sub.add_parser("data", help="dataset management").add_subparsers(dest="action", required=True)
    fetch = data.add_parser("fetch", help="download MNIST IDX files")
    fetch.add_argument("--checksum", action="store_true", help="verify md5/sha256 of every file")
    fetch.add_argument("--dest", type=Path, help="target directory (default: the data directory)")

    diag = sub.add_parser("diag", help="diagnostics").add_subparsers(dest="action", required=True)
    lyap = diag.add_parser("lyapunov", help="running Lyapunov estimate along one chain of a config")
    lyap.add_argument("config", type=Path)
    lyap.add_argument("--data-dir", type=Path)
    lyap.add_argument("--arm", choices=("baseline", "ghost"), default="ghost")
    lyap.add_argument("--run", type=int, default=0, help="run index (selects the seed)")
    lyap.add_argument("--steps", type=int, help="chain length (default: epochs × steps per epoch)")
    lyap.add_argument("--every", default="1,10", help="comma list of probe cadences to report")
    lyap.add_argument("--json", type=Path, help="also write the report here")

    demo = sub.add_parser("demo", help="demonstrations").add_subparsers(dest="action", required=True)
    demo.add_parser("bypass", help="barrier-bypass certificate on the ridge landscape")

    sub.add_parser("selftest", help="run the built-in numerical checks")
    return p


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_IO if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .harness import ConfigError
    try:
        handler = {
            ("study", "run"): _study_run,
            ("study", "plot"): _study_plot,
            ("data", "fetch"): _data_fetch,
            ("diag", "lyapunov"): _diag_lyapunov,
            ("demo", "bypass"): _demo_bypass,
        }.get((args.command, getattr(args, "action", None)), _selftest)
        return handler(args)
    except DatasetNotFound as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO


def _study_run(args) -> int:
    from .harness import load_config, run_study, summarize, write_study
    cfg = load_config(args.config)
    if args.workers:
        from dataclasses import replace
        cfg = replace(cfg, workers=args.workers)
    out = args.out or Path(cfg.out_dir)

    def progress(run_id, pair):
        peaks = ", ".join(f"{r.arm} peak {r.peak_epoch}" for r in pair)
        print(f"run {run_id + 1}/{cfg.runs}: {peaks}", flush=True)

    results, provenance = run_study(cfg, args.data_dir, progress=progress)
    summary = summarize(cfg, results, provenance)
    paths = write_study(out, cfg, results, summary, plots=not args.no_plots)
    shift = summary["paired_shift_mean"]
    print(f"paired mean peak shift (baseline - ghost): "
          f"{'n/a' if shift is None else f'{shift:.3f}'} epochs over {summary['paired_shift_n']} runs "
          f"(published: {summary['published_shift']})")
    print(f"flagged runs: {summary['flagged_runs'] or 'none'}; "
          f"undetected peaks: {summary['undetected_peak_runs'] or 'none'}")
    print(f"wrote {paths['csv']} and {paths['summary']}")
    return EXIT_OK


def _study_plot(args) -> int:
    from .harness import parse_csv
    from .svg import emit_plots
    summary = json.loads((args.dir / "summary.json").read_text())
    results = parse_csv((args.dir / "runs.csv").read_text())
    for name, path in emit_plots(summary, results, args.dir / "plots").items():
        print(f"{name}: {path}")
    return EXIT_OK


def _data_fetch(args) -> int:
    from .fetch import ChecksumError, fetch_mnist
    dest = args.dest or resolve_data_dir()
    try:
        paths = fetch_mnist(dest, checksum=args.checksum)
    except ChecksumError as err:
        print(f"checksum failure: {err}", file=sys.stderr)
        return EXIT_INVALID
    for p in paths:
        print(p)
    return EXIT_OK


def _diag_lyapunov(args) -> int:
    from .data import load_mnist, rmnist_sample
    from .diagnostics import NORM_NAME, LyapunovObserver, SpectralProbe
    from .harness import load_config
    from .optim import BatchSampler, ModelObjective, SgdState, run_chain

    cfg = load_config(args.config)
    cadences = sorted({int(k) for k in args.every.split(",") if k.strip()})
    if not cadences or cadences[0] < 1:
        print("--every needs positive integers", file=sys.stderr)
        return EXIT_INVALID
    seed = cfg.seed + args.run
    train = rmnist_sample(load_mnist("train", args.data_dir), cfg.per_class, seed)
    from .models import build
    model, params = build(cfg.model_spec(0 if args.arm == "baseline" else cfg.ghosts, seed))
    objective = ModelObjective(model, params, train.images, train.labels)
    sampler = BatchSampler(len(train), cfg.batch_size or None, cfg.batch_mode, seed)
    steps = args.steps or cfg.epochs * cfg.steps_per_epoch
    probe = SpectralProbe(solver=cfg.lyapunov_solver, max_iter=cfg.lyapunov_max_iter, seed=seed)
    observer = LyapunovObserver(objective.full_grad, cfg.eta, probe)
    base = math.gcd(*cadences)
    t0 = time.perf_counter()
    state = SgdState(params.data.copy(), eta=cfg.eta, seed=seed, domain_bound=cfg.domain_bound)
    _, records = run_chain(state, objective, sampler, steps, [observer], cadence=base)
    probed = {r.step: r.lyapunov_summand for r in records if r.lyapunov_summand is not None}
    report = {"config": str(args.config), "arm": args.arm, "seed": seed, "steps": steps,
              "eta": cfg.eta, "norm": NORM_NAME, "solver": cfg.lyapunov_solver,
              "unconverged_probes": observer.unconverged, "gamma_hat": {}}
    for k in cadences:
        logs = [v for t, v in sorted(probed.items()) if (t + 1) % k == 0]
        value = float(np.mean(logs)) if logs else None
        report["gamma_hat"][str(k)] = {"probes": len(logs), "value": value}
        print(f"k={k}: {len(logs)} probes, gamma_hat = {'n/a' if value is None else f'{value:+.6f}'}")
    report["seconds"] = round(time.perf_counter() - t0, 3)
    print(f"norm: {NORM_NAME}; unconverged probes: {observer.unconverged}")
    if args.json:
        args.json.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _demo_bypass(args) -> int:
    from .certificate import bypass_path, verify_path_certificate
    from .data import Ridge2D
    land = Ridge2D()
    cert = bypass_path(land)
    rep = verify_path_certificate(cert)
    left, ridge, right = land.critical_points()
    print(f"ridge2d: wells at w1={left:.5f}, {right:.5f}; ridge at w1={ridge:.5f} "
          f"(height {land.evaluate([ridge, 0.0])[0] - land.evaluate([left, 0.0])[0]:.4f} above the left well)")
    print(f"path: {len(cert.t)} samples, f_ext {cert.f_ext[0]:.6f} -> {cert.f_ext[-1]:.6f}, "
          f"largest step change {np.diff(cert.f_ext).max():.3e} (tolerance {cert.tolerance:g})")
    print(f"f_orig drop: {cert.f_orig[0]:.6f} -> {cert.f_orig[-1]:.6f} = {rep.drop:.6f} "
          f"(epsilon {cert.epsilon:g})")
    print(f"certificate {'VALID' if rep.valid else 'INVALID'}: {rep.message}")
    return EXIT_OK if rep.valid else EXIT_INVALID


def _selftest(args) -> int:
    from .selftest import run_checks
    failures = 0
    for name, ok, detail in run_checks():
        failures += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    print(f"{failures} failure(s)")
    return EXIT_OK if failures == 0 else EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
