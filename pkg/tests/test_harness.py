import hashlib
import json
import math
from dataclasses import replace

import numpy as np
import pytest

from ghostsgd.data import Dataset
from ghostsgd.harness import (
    CSV_COLUMNS,
    ConfigError,
    ExperimentConfig,
    RunResult,
    dump_config,
    emit_csv,
    load_config,
    parse_config,
    parse_csv,
    run_single,
    run_study,
    summarize,
    write_study,
)
from ghostsgd.models import build, unflatten_params
from ghostsgd.svg import emit_plots

from conftest import CONFIGS, needs_mnist

TINY = ExperimentConfig(model="mlp", hidden=(8,), per_class=2, runs=1, epochs=4, lyapunov_every=2)


def fake_data(n, seed=0):
    r = np.random.default_rng(seed)
    return Dataset(r.random((n, 1, 28, 28)), np.tile(np.arange(10), n // 10))


def fake_results(runs, epochs=12, seed=0):
    """Synthetic finished runs with a test-loss bump, for summary and plot tests."""
    r = np.random.default_rng(seed)
    out = []
    t = np.arange(1, epochs + 1)
    for rid in range(runs):
        for arm, centre in (("baseline", 6.0), ("ghost", 5.0)):
            test = 2.0 * np.exp(-t / 4) + 0.4 * np.exp(-((t - centre) ** 2) / 2) + r.normal(0, 0.01, epochs)
            res = RunResult(rid, arm, rid, 0 if arm == "baseline" else 2,
                            list(np.exp(-t / 3)), list(test), list(1 - test / 3),
                            [math.nan] * epochs, list(np.exp(-t) if arm == "ghost" else np.zeros(epochs)))
            res.init = {"test_loss": 2.3 + (0.1 if arm == "ghost" else 0.0)}
            res.peak_epoch = int(centre)
            res.f_ghost_quarters = (0.5, 0.01) if arm == "ghost" else (0.0, 0.0)
            out.append(res)
    return out


# ---------------------------------------------------------------- config

def test_config_round_trip():
    cfg = ExperimentConfig(eta=0.013, channels=(4, 6), runs=3, gamma_init="gaussian:0.01")
    assert parse_config(dump_config(cfg)) == cfg


def test_dump_materializes_every_key():
    text = dump_config(ExperimentConfig())
    for key in ("eta = 0.05", "epochs = 200", "channels = 8,16", "smooth_window = 1", "ghosts = 2"):
        assert key in text


def test_parse_config_comments_and_defaults():
    cfg = parse_config("# header\nruns = 4  # four\n\nmodel = mlp\n")
    assert cfg.runs == 4 and cfg.model == "mlp" and cfg.eta == 0.05


@pytest.mark.parametrize("text,match", [
    ("colour = red", "unknown key"),
    ("runs = 2\nruns = 3", "duplicate"),
    ("runs", "key = value"),
    ("runs = many", "cannot parse"),
    ("eta = 0", "eta"),
    ("epochs = 2", "epochs"),
    ("momentum = 0.9", "momentum"),
    ("smooth_window = 2", "smooth_window"),
    ("model = resnet", "model"),
    ("batch_mode = with_replacement\nbatch_size = 0", "batch size"),
    ("ghosts = 0", "ghosts"),
    ("activation = softmax", "activation"),
    ("gamma_init = uniform", "gamma_init"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


@pytest.mark.parametrize("name", ["rmnist30.conf", "rmnist30-smoke.conf", "mlp-smoke.conf"])
def test_shipped_configs_load(name):
    cfg = load_config(CONFIGS / name)
    assert cfg.batch_mode == "full_batch" and cfg.momentum == 0.0


def test_reference_config_matches_the_study_design():
    cfg = load_config(CONFIGS / "rmnist30.conf")
    assert (cfg.runs, cfg.ghosts, cfg.model, cfg.per_class) == (30, 2, "cnn2block", 30)
    assert load_config(CONFIGS / "rmnist30-smoke.conf").runs == 5


def test_arms_share_their_initialisation():
    cfg = ExperimentConfig()
    base = unflatten_params(build(cfg.model_spec(0, 7))[1])
    ghost = unflatten_params(build(cfg.model_spec(2, 7))[1])
    assert all(ghost[k].tobytes() == v.tobytes() for k, v in base.items())


# ---------------------------------------------------------------- single runs

def test_run_single_shapes():
    res = run_single(TINY, 0, "ghost", fake_data(20), fake_data(30, 1))
    assert res.failed is None
    for series in (res.train_loss, res.test_loss, res.test_acc, res.gamma_hat, res.f_ghost_mean):
        assert len(series) == TINY.epochs
    assert math.isnan(res.gamma_hat[0]) and all(math.isfinite(g) for g in res.gamma_hat[1:])
    assert res.ghosts == 2 and res.projections == 0
    assert [row[2] for row in res.rows()] == [1, 2, 3, 4]


def test_arms_see_the_same_data_and_differ_only_in_ghosts():
    train, test = fake_data(20), fake_data(30, 1)
    b = run_single(TINY, 0, "baseline", train, test)
    g = run_single(TINY, 0, "ghost", train, test)
    assert b.seed == g.seed and (b.ghosts, g.ghosts) == (0, 2)
    assert g.init["test_loss"] >= b.init["test_loss"]
    assert g.init["test_loss_orig"] == b.init["test_loss"]
    assert not any(b.f_ghost_mean)


def test_run_single_is_deterministic():
    train, test = fake_data(20), fake_data(30, 1)
    a = run_single(TINY, 0, "ghost", train, test)
    b = run_single(TINY, 0, "ghost", train, test)
    assert a.trajectory_sha == b.trajectory_sha
    assert emit_csv([a]) == emit_csv([b])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_run_is_flagged_and_excluded():
    cfg = replace(TINY, eta=1e300, domain_bound=1e300, lyapunov_every=0)
    bad = run_single(cfg, 0, "ghost", fake_data(20), fake_data(30, 1))
    assert bad.failed and "NonFinite" in bad.failed
    assert bad.peak_epoch is None
    results = fake_results(3)
    results[3] = replace(bad, run_id=1)
    summary = summarize(replace(TINY, runs=3), results)
    assert summary["flagged_runs"] == [1]
    assert summary["runs_used"] == 2 and summary["paired_shift_n"] == 2


# ---------------------------------------------------------------- summaries and files

def test_summary_statistics():
    summary = summarize(replace(TINY, runs=4), fake_results(4))
    assert summary["paired_shift_mean"] == 1.0 and summary["paired_shift_sd"] == 0.0
    assert summary["shift_positive"] and summary["published_shift"] == 4.8
    assert summary["init_ghost_test_loss_ge_baseline"]
    assert summary["f_ghost_ratio_max"] == pytest.approx(0.02)
    assert summary["f_ghost_decay_ok"]
    assert summary["band_sd"].startswith("sample")


def test_band_uses_sample_standard_deviation():
    results = fake_results(3)
    band = summarize(replace(TINY, runs=3), results)["band"]["ghost"]
    series = np.array([r.test_loss for r in results if r.arm == "ghost"])
    np.testing.assert_allclose(band["sd"], series.std(axis=0, ddof=1))
    np.testing.assert_allclose(band["mean"], series.mean(axis=0))


def test_single_run_band_collapses_to_the_curve():
    results = fake_results(1)
    band = summarize(TINY, results)["band"]["baseline"]
    assert band["sd"] == [0.0] * 12
    assert band["mean"] == results[0].test_loss


def test_undetected_peaks_are_reported_not_imputed():
    results = fake_results(2)
    results[2].peak_epoch = None
    summary = summarize(replace(TINY, runs=2), results)
    assert summary["undetected_peak_runs"] == [1]
    assert summary["paired_shift_n"] == 1


def test_empty_results_give_a_header_only_csv():
    assert emit_csv([]) == ",".join(CSV_COLUMNS) + "\n"
    assert parse_csv(emit_csv([])) == []


def test_csv_round_trip():
    text = emit_csv(fake_results(2))
    assert len(text.splitlines()) == 1 + 2 * 2 * 12
    back = parse_csv(text)
    assert emit_csv(back) == text
    orig = fake_results(2)
    assert [r.test_loss for r in back] == [r.test_loss for r in orig]


def test_csv_floats_keep_full_precision():
    res = fake_results(1)[:1]
    res[0].test_loss[0] = 0.1 + 0.2
    assert "0.30000000000000004" in emit_csv(res)


def test_thirty_runs_give_two_summaries_and_six_grids(tmp_path):
    results = fake_results(30)
    summary = summarize(ExperimentConfig(runs=30), results)
    paths = emit_plots(summary, results, tmp_path)
    names = sorted(p.name for p in paths.values())
    assert len(names) == 8
    assert "band.svg" in names and "peaks.svg" in names
    assert sum(n.startswith("grid_") for n in names) == 6


def test_svg_bytes_are_deterministic(tmp_path):
    results = fake_results(4)
    summary = summarize(replace(TINY, runs=4), results)
    a = {k: p.read_bytes() for k, p in emit_plots(summary, results, tmp_path / "a").items()}
    b = {k: p.read_bytes() for k, p in emit_plots(summary, results, tmp_path / "b").items()}
    assert a == b
    assert all(v.startswith(b"<svg") or v.startswith(b"<?xml") for v in a.values())


def test_write_study_outputs(tmp_path):
    results = fake_results(2)
    summary = summarize(replace(TINY, runs=2), results)
    paths = write_study(tmp_path, replace(TINY, runs=2), results, summary)
    loaded = json.loads(paths["summary"].read_text())
    assert loaded["paired_shift_mean"] == 1.0
    assert parse_config(paths["config"].read_text()) == replace(TINY, runs=2)
    assert paths["csv"].read_text() == emit_csv(results)
    # NaN γ̂ values become nulls so the summary stays strict JSON
    assert "NaN" not in paths["summary"].read_text()


def test_unwritable_output_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    results = fake_results(1)
    with pytest.raises(OSError):
        write_study(blocker / "out", TINY, results, summarize(TINY, results), plots=False)


# ---------------------------------------------------------------- MNIST smoke study

@pytest.fixture(scope="module")
def smoke_study(tmp_path_factory):
    cfg = load_config(CONFIGS / "mlp-smoke.conf")
    outputs = []
    for name in ("first", "second"):
        results, prov = run_study(cfg)
        summary = summarize(cfg, results, prov)
        out = tmp_path_factory.mktemp(name)
        paths = write_study(out, cfg, results, summary)
        outputs.append((results, summary, paths))
    return cfg, outputs


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@needs_mnist
def test_smoke_study_shape(smoke_study):
    cfg, [(results, summary, paths), _] = smoke_study
    assert len(results) == 2
    rows = paths["csv"].read_text().splitlines()
    assert rows[0] == ",".join(CSV_COLUMNS)
    assert len(rows) == 1 + 6
    assert summary["projections_total"] == 0
    assert summary["init_ghost_test_loss_ge_baseline"]
    assert summary["data"]["0"]["per_class"] == 30


@needs_mnist
def test_smoke_study_is_byte_identical(smoke_study):
    _, [(_, _, a), (_, _, b)] = smoke_study
    for key in a:
        if key != "timing":
            assert digest(a[key]) == digest(b[key]), key


@needs_mnist
def test_smoke_study_csv_round_trip(smoke_study):
    _, [(results, _, paths), _] = smoke_study
    text = paths["csv"].read_text()
    assert emit_csv(parse_csv(text)) == text
    assert [r.test_loss for r in parse_csv(text)] == [r.test_loss for r in results]
