import json
import struct

import numpy as np
import pytest

from chanpred.cli import main
from chanpred.network import NetworkSpec, init_params, load_checkpoint, param_tensors


def run_cli(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def small_ctfs(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "small.ctfs"
    assert run_cli("simulate", "--out", path, "--runs", 2, "--steps", 128,
                   "--seed", 5) == 0
    return path


def test_simulate_header_dimensions(small_ctfs):
    blob = small_ctfs.read_bytes()
    assert blob[:8] == b"CTFS0001"
    assert struct.unpack("<III", blob[8:20]) == (2, 128, 256)
    assert (small_ctfs.parent / "small.ctfs.manifest.json").exists()
    manifest = json.loads((small_ctfs.parent
                           / "small.ctfs.manifest.json").read_text())
    assert manifest["command"] == "simulate"
    assert manifest["outputs"][0]["sha256"]


def test_simulate_same_seed_byte_identical(tmp_path):
    a = tmp_path / "a.ctfs"
    b = tmp_path / "b.ctfs"
    for out in (a, b):
        assert run_cli("simulate", "--out", out, "--runs", 1, "--steps", 8,
                       "--seed", 9) == 0
    assert a.read_bytes() == b.read_bytes()


def test_simulate_workers_match_sequential(tmp_path):
    seq = tmp_path / "seq.ctfs"
    par = tmp_path / "par.ctfs"
    assert run_cli("simulate", "--out", seq, "--runs", 2, "--steps", 8,
                   "--seed", 4) == 0
    assert run_cli("simulate", "--out", par, "--runs", 2, "--steps", 8,
                   "--seed", 4, "--workers", 2) == 0
    assert seq.read_bytes() == par.read_bytes()


def test_exit_codes(tmp_path):
    # missing input file -> I/O error
    assert run_cli("render", "--data", tmp_path / "nope.ctfs",
                   "--out-dir", tmp_path) == 3
    # invalid config JSON -> config error
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run_cli("simulate", "--config", bad, "--out", tmp_path / "x.ctfs") == 2
    # unknown config key -> config error
    unk = tmp_path / "unk.json"
    unk.write_text(json.dumps({"carrier": 1e9}))
    assert run_cli("simulate", "--config", unk, "--out", tmp_path / "x.ctfs") == 2
    # corrupt container -> validation/data error
    corrupt = tmp_path / "c.ctfs"
    corrupt.write_bytes(b"CTFS0001" + struct.pack("<III", 1, 1, 1) + b"\0" * 8)
    assert run_cli("render", "--data", corrupt, "--out-dir", tmp_path) == 4


@pytest.fixture(scope="module")
def trained(small_ctfs, tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("model")
    cfg = out_dir / "train.json"
    cfg.write_text(json.dumps({"segment_len": 64, "m": 3, "epochs": 2,
                               "seed": 7}))
    model = out_dir / "model.cpnn"
    assert run_cli("train", "--data", small_ctfs, "--out", model,
                   "--config", cfg) == 0
    return model


def test_train_outputs(trained):
    base = trained.parent / "model_report"
    csv_text = (base.parent / "model_report.csv").read_text().strip().splitlines()
    assert csv_text[0] == "delta_t,mse_train,mse_val,mse_test,mse_trivial"
    assert len(csv_text) == 4  # header + m=3 rows
    assert (base.parent / "model_report.json").exists()
    assert (base.parent / "model_report_mse.png").stat().st_size > 0
    assert (base.parent / "model_report_loss.png").stat().st_size > 0
    spec, params, header = load_checkpoint(trained)
    assert spec.m == 3
    assert header["epochs"] == 2


def test_train_zero_epochs_equals_init(small_ctfs, tmp_path):
    cfg = tmp_path / "t.json"
    cfg.write_text(json.dumps({"segment_len": 64, "m": 2, "epochs": 0,
                               "seed": 21}))
    model = tmp_path / "init.cpnn"
    assert run_cli("train", "--data", small_ctfs, "--out", model,
                   "--config", cfg) == 0
    spec, params, _ = load_checkpoint(model)
    reference = init_params(NetworkSpec.default(m=2), np.random.default_rng(21))
    for a, b in zip(param_tensors(params), param_tensors(reference)):
        np.testing.assert_array_equal(a, b)


def test_train_rerun_identical_report(small_ctfs, tmp_path):
    cfg = tmp_path / "t.json"
    cfg.write_text(json.dumps({"segment_len": 64, "m": 2, "epochs": 1,
                               "seed": 3}))
    reports = []
    for name in ("r1", "r2"):
        model = tmp_path / f"{name}.cpnn"
        assert run_cli("train", "--data", small_ctfs, "--out", model,
                       "--config", cfg, "--report", tmp_path / name) == 0
        reports.append((tmp_path / f"{name}.csv").read_bytes())
    assert reports[0] == reports[1]


def test_evaluate_reproduces_train_table(small_ctfs, trained, tmp_path):
    out = tmp_path / "eval"
    assert run_cli("evaluate", "--data", small_ctfs, "--model", trained,
                   "--out", out) == 0
    eval_rows = (tmp_path / "eval.csv").read_text().splitlines()[1:]
    train_rows = (trained.parent / "model_report.csv").read_text().splitlines()[1:]
    assert eval_rows == train_rows


def test_render_raster(small_ctfs, tmp_path):
    out = tmp_path / "figs"
    assert run_cli("render", "--data", small_ctfs, "--out-dir", out,
                   "--mode", "raster", "--run", 1) == 0
    ppm = out / "raster_run1.ppm"
    blob = ppm.read_bytes()
    assert blob.startswith(b"P6\n128 256\n255\n")
    assert len(blob) == len(b"P6\n128 256\n255\n") + 128 * 256 * 3
    assert (out / "raster_run1.png").stat().st_size > 0
    assert (out / "manifest.json").exists()


def test_render_spectra(small_ctfs, trained, tmp_path):
    out = tmp_path / "sp"
    assert run_cli("render", "--data", small_ctfs, "--out-dir", out,
                   "--mode", "spectra", "--t0", 100, "--dt", 2,
                   "--model", trained) == 0
    rows = (out / "spectra_run0_t100_dt2.csv").read_text().splitlines()
    assert rows[0] == "f,observed_t0,observed_future,predicted"
    assert len(rows) == 257
    # out of range / missing model
    assert run_cli("render", "--data", small_ctfs, "--out-dir", out,
                   "--mode", "spectra", "--t0", 127, "--dt", 2,
                   "--model", trained) == 4
    assert run_cli("render", "--data", small_ctfs, "--out-dir", out,
                   "--mode", "spectra", "--t0", 10) == 4


def test_gradcheck_pass_and_inject_bug(capsys):
    assert run_cli("gradcheck", "--seeds", 1) == 0
    out = capsys.readouterr().out
    assert "PASS" in out
    assert "L0=" in out   # per-layer errors reported
    assert run_cli("gradcheck", "--seeds", 1, "--inject-bug") == 5
    assert "FAIL" in capsys.readouterr().out
