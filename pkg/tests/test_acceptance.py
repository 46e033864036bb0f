"""Acceptance gate: one test per criterion, each printing a PASS line.

Criteria 3-5 run on the full-scale dataset (16 runs x 4096 steps, 30
training epochs) and are marked slow; `pytest -m "not slow"` skips them
for quick iteration.  Set CHANPRED_CACHE_DIR to persist the full-scale
artifacts between invocations, and CHANPRED_PROGRESS_FILE to monitor the
long training from outside the process.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from chanpred.cli import GRADCHECK_TOLERANCE, gradcheck_instance
from chanpred.estimation import (gen_test_signal, raw_estimate, read_ctfs,
                                 refine_estimate, run_estimation_campaign)
from chanpred.fourier import fft, ifft
from chanpred.network import (NetworkSpec, grad_check, init_params,
                              load_checkpoint, network_forward,
                              save_checkpoint)
from chanpred.simulation import (SimConfig, Signal, advance, apply_channel,
                                 init_simulation, path_geometry, snapshot,
                                 true_transfer_function)
from chanpred.training import (Segment, TrainConfig, build_dataset, train,
                               trivial_baseline_mse)

BASE_SEED = 2024

# paper values the ratio/containment gates are anchored to
PAPER_TRIVIAL_DT1 = 0.2217
PAPER_TRIVIAL_DT10 = 1.0797
PAPER_TEST_DT1 = 0.1424


def _progress_file():
    path = os.environ.get("CHANPRED_PROGRESS_FILE")
    return open(path, "a") if path else None


def _log(msg: str) -> None:
    fh = _progress_file()
    if fh:
        fh.write(f"{time.strftime('%H:%M:%S')} {msg}\n")
        fh.close()


# ---------------------------------------------------------------------------
# full-scale artifacts (shared by criteria 3-5)


@pytest.fixture(scope="session")
def paper_series(tmp_path_factory):
    cache_dir = os.environ.get("CHANPRED_CACHE_DIR")
    if cache_dir:
        path = Path(cache_dir) / "acceptance_full.ctfs"
        if path.exists():
            return read_ctfs(path)
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
    else:
        path = tmp_path_factory.mktemp("acceptance") / "acceptance_full.ctfs"
    _log("building full-scale dataset (16 x 4096)")
    from chanpred.cli import main as cli_main
    rc = cli_main(["simulate", "--out", str(path), "--runs", "16",
                   "--seed", str(BASE_SEED), "--workers", "2"])
    assert rc == 0
    return read_ctfs(path)


@pytest.fixture(scope="session")
def paper_training(paper_series):
    cache_dir = os.environ.get("CHANPRED_CACHE_DIR")
    spec = NetworkSpec.default(m=10)
    if cache_dir:
        ckpt = Path(cache_dir) / "acceptance_model.cpnn"
        report_json = Path(cache_dir) / "acceptance_report.json"
        if ckpt.exists() and report_json.exists():
            import json
            spec2, params, _ = load_checkpoint(ckpt)
            doc = json.loads(report_json.read_text())
            from chanpred.training import EvalReport
            report = EvalReport(
                delta_ts=doc["delta_ts"], mse_train=doc["mse_train"],
                mse_val=doc["mse_val"], mse_test=doc["mse_test"],
                mse_trivial=doc["mse_trivial"],
                train_loss_history=doc["train_loss_history"],
                val_loss_history=doc["val_loss_history"])
            return spec2, params, report

    dataset = build_dataset(paper_series, seed=BASE_SEED)
    tc = TrainConfig(epochs=30, m=10, seed=BASE_SEED)

    def progress(epoch, pos, total, loss):
        if pos == total:
            _log(f"epoch {epoch + 1}/30 last-segment loss {loss:.5f}")

    _log("training 30 epochs on the full-scale dataset")
    params, report = train(spec, dataset, tc, progress=progress)
    if cache_dir:
        from chanpred.reports import write_report_json
        save_checkpoint(Path(cache_dir) / "acceptance_model.cpnn", spec, params,
                        seed=BASE_SEED)
        write_report_json(report, Path(cache_dir) / "acceptance_report.json")
    return spec, params, report


# ---------------------------------------------------------------------------
# criterion 1: gradient fidelity


def test_c1_gradient_fidelity():
    start = time.perf_counter()
    worst = 0.0
    for seed in (1, 2, 3):
        spec, params, x, target = gradcheck_instance(seed)
        maxerr, _ = grad_check(spec, params, x, target)
        worst = max(worst, maxerr)
        assert maxerr < GRADCHECK_TOLERANCE, f"seed {seed}: {maxerr:.3e}"
    elapsed = time.perf_counter() - start
    assert elapsed < 60.0, f"gradient check took {elapsed:.1f}s"
    print(f"\nACCEPTANCE C1 PASS: gradient fidelity max rel err "
          f"{worst:.2e} < 1e-5 on 3 instances in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 2: estimator correctness


def test_c2_estimator_correctness():
    # noise disabled; the channel is evaluated frozen at each block start
    # (its within-block Doppler rotation is what the estimator itself
    # later sees as noise, ~2e-3 relative, see decision record); the
    # geometry still evolves across the 64 steps
    cfg = SimConfig(n_steps=64)
    state = init_simulation(cfg, seed=BASE_SEED)
    rng = np.random.default_rng(BASE_SEED)
    worst = 0.0
    for _ in range(64):
        snap = snapshot(state)
        ts = gen_test_signal(cfg.n_samples, rng, cfg.sample_rate)
        rx = apply_channel(snap, ts.time, rng, noiseless=True,
                           include_doppler=False)
        refined = refine_estimate(raw_estimate(fft(rx.samples),
                                               ts.spectrum)).values
        truth = true_transfer_function(snap, cfg.n_samples)[::2]
        rel = np.linalg.norm(refined - truth) / np.linalg.norm(truth)
        worst = max(worst, rel)
        state = advance(state)
    assert worst < 1e-6
    print(f"\nACCEPTANCE C2 PASS: noiseless refined estimates match the "
          f"decimated truth, worst rel err {worst:.2e} < 1e-6 over 64 steps")


# ---------------------------------------------------------------------------
# criterion 3: trivial baseline magnitude (full scale)


@pytest.mark.slow
def test_c3_trivial_baseline_magnitude(paper_series):
    runs = [Segment(grid=paper_series.values[r], run=r, index=0)
            for r in range(paper_series.n_runs)]
    mses = [trivial_baseline_mse(runs, dt) for dt in range(1, 11)]
    assert 0.13 <= mses[0] <= 0.33, f"trivial dt=1 MSE {mses[0]:.4f}"
    assert all(b > a for a, b in zip(mses, mses[1:])), \
        f"not strictly increasing: {mses}"
    paper_ratio = PAPER_TRIVIAL_DT10 / PAPER_TRIVIAL_DT1
    ratio = mses[9] / mses[0]
    assert 0.7 * paper_ratio <= ratio <= 1.3 * paper_ratio, \
        f"ratio {ratio:.2f} vs paper {paper_ratio:.2f} +-30%"
    print(f"\nACCEPTANCE C3 PASS: trivial dt=1 {mses[0]:.4f} in [0.13, 0.33] "
          f"(paper {PAPER_TRIVIAL_DT1}), strictly increasing, "
          f"dt10/dt1 {ratio:.2f} within 30% of {paper_ratio:.2f}")


# ---------------------------------------------------------------------------
# criterion 4: the CNN beats the trivial baseline


@pytest.mark.slow
def test_c4_cnn_beats_baseline_full(paper_training):
    _, _, report = paper_training
    for i, dt in enumerate(report.delta_ts):
        assert report.mse_test[i] < report.mse_trivial[i], \
            f"dt={dt}: test {report.mse_test[i]:.4f} >= " \
            f"trivial {report.mse_trivial[i]:.4f}"
    ratio = report.mse_test[0] / report.mse_trivial[0]
    assert ratio <= 0.80, f"dt=1 test/trivial {ratio:.3f} > 0.80"
    print(f"\nACCEPTANCE C4 PASS: test MSE below trivial at all dt in 1..10; "
          f"dt=1 ratio {ratio:.3f} <= 0.80 "
          f"(paper {PAPER_TEST_DT1}/{PAPER_TRIVIAL_DT1} = "
          f"{PAPER_TEST_DT1 / PAPER_TRIVIAL_DT1:.2f})")


def test_c4_reduced_profile():
    # 4 runs x 1024 steps, 10 epochs: the pooled 6:1:1 split must still
    # leave the network ahead of the trivial baseline at dt in {1, 2, 5};
    # the m=5 variant covers those horizons and converges within the
    # 60-step budget (m=10 needs more steps at the dt=1 gate)
    cfg = SimConfig(n_steps=1024)
    series = run_estimation_campaign(cfg, n_runs=4, seed=BASE_SEED)
    dataset = build_dataset(series, seed=BASE_SEED)
    spec = NetworkSpec.default(m=5)
    params, report = train(spec, dataset,
                           TrainConfig(epochs=10, m=5, seed=BASE_SEED))
    for dt in (1, 2, 5):
        i = dt - 1
        assert report.mse_test[i] < report.mse_trivial[i], \
            f"dt={dt}: test {report.mse_test[i]:.4f} >= " \
            f"trivial {report.mse_trivial[i]:.4f}"
    print(f"\nACCEPTANCE C4 (reduced profile) PASS: test MSE "
          f"{[round(report.mse_test[d - 1], 4) for d in (1, 2, 5)]} below "
          f"trivial {[round(report.mse_trivial[d - 1], 4) for d in (1, 2, 5)]} "
          f"at dt in (1, 2, 5)")


# ---------------------------------------------------------------------------
# criterion 5: no significant overfitting


@pytest.mark.slow
def test_c5_no_overfitting(paper_training):
    _, _, report = paper_training
    worst = 0.0
    for i, dt in enumerate(report.delta_ts):
        gap = abs(report.mse_test[i] - report.mse_val[i]) / report.mse_val[i]
        worst = max(worst, gap)
        assert gap < 0.10, f"dt={dt}: |test-val|/val = {gap:.3f}"
    print(f"\nACCEPTANCE C5 PASS: |test - val| / val < 0.10 at every dt "
          f"(worst {worst:.3f})")


# ---------------------------------------------------------------------------
# criterion 6: physics invariants suite


def test_c6_physics_invariants():
    checks = []

    # normalisation sum((norm * a_i)^2) == 1 to 1e-12 at every step
    state = init_simulation(SimConfig(n_steps=20), seed=BASE_SEED)
    worst_norm = 0.0
    for _ in range(20):
        snap = snapshot(state)
        worst_norm = max(worst_norm,
                         abs(np.sum((snap.norm * snap.amplitude) ** 2) - 1.0))
        state = advance(state)
    assert worst_norm < 1e-12
    checks.append(f"normalisation {worst_norm:.1e} < 1e-12")

    # analytic dl/dt vs central finite differences, 1000 random geometries
    from chanpred.simulation import ReceiverState, Scatterer
    rng = np.random.default_rng(17)
    worst_fd = 0.0
    trials = 0
    while trials < 1000:
        sp = rng.uniform(-500, 500, 2)
        sv = rng.normal(0, 10, 2)
        rp = rng.uniform(-500, 500, 2)
        rv = rng.normal(0, 10, 2)
        if np.hypot(*sp) < 1.0 or np.hypot(*(sp - rp)) < 1.0:
            continue
        trials += 1
        _, dl = path_geometry(Scatterer(sp, sv), ReceiverState(rp, rv),
                              (0.0, 0.0))

        def l_at(dt):
            s2, r2 = sp + sv * dt, rp + rv * dt
            return np.hypot(*s2) + np.hypot(*(r2 - s2))

        fd = (l_at(1e-6) - l_at(-1e-6)) / 2e-6
        worst_fd = max(worst_fd, abs(dl - fd) / max(abs(fd), 1.0))
    assert worst_fd < 1e-6
    checks.append(f"dl/dt vs finite differences {worst_fd:.1e} < 1e-6")

    # channel linearity to 1e-12
    snap = snapshot(init_simulation(SimConfig(), seed=BASE_SEED + 1))
    rng = np.random.default_rng(18)
    s1 = Signal(rng.normal(size=512) + 1j * rng.normal(size=512), 25.6e6)
    s2 = Signal(rng.normal(size=512) + 1j * rng.normal(size=512), 25.6e6)
    alpha, beta = 1.5 - 0.5j, -0.25 + 2.0j
    combo = Signal(alpha * s1.samples + beta * s2.samples, 25.6e6)
    lhs = apply_channel(snap, combo, rng, noiseless=True).samples
    rhs = (alpha * apply_channel(snap, s1, rng, noiseless=True).samples
           + beta * apply_channel(snap, s2, rng, noiseless=True).samples)
    lin_err = np.max(np.abs(lhs - rhs))
    assert lin_err < 1e-12
    checks.append(f"channel linearity {lin_err:.1e} < 1e-12")

    # FFT round trip to 1e-12
    x = rng.normal(size=512) + 1j * rng.normal(size=512)
    rt_err = np.max(np.abs(ifft(fft(x)) - x))
    assert rt_err < 1e-12
    checks.append(f"fft round trip {rt_err:.1e} < 1e-12")

    # causality and receptive field: bitwise probes
    spec = NetworkSpec.default(m=1)
    params = init_params(spec, np.random.default_rng(19))
    xin = np.random.default_rng(20).normal(size=(2, 300, 6))
    base = network_forward(spec, params, xin)
    pert = xin.copy()
    pert[:, 260, :] += 1.0
    probe = network_forward(spec, params, pert)
    assert np.array_equal(base[:, :260, :], probe[:, :260, :])
    far = xin.copy()
    far[:, 290 - 256, :] += 1.0
    assert np.array_equal(network_forward(spec, params, far)[:, 290, :],
                          base[:, 290, :])
    near = xin.copy()
    near[:, 290 - 255, :] += 1.0
    assert not np.array_equal(network_forward(spec, params, near)[:, 290, :],
                              base[:, 290, :])
    checks.append("causality and 256-step receptive field bitwise")

    print("\nACCEPTANCE C6 PASS: " + "; ".join(checks))


# ---------------------------------------------------------------------------
# supplementary: rendered spectra track future fades


@pytest.mark.slow
def test_spectra_prediction_tracks_future_fades(paper_series, paper_training):
    # dB-domain MSE of the prediction against the future spectrum must be
    # lower than that of simply showing the present spectrum
    from chanpred.reports import power_db
    from chanpred.training import complex_to_tensor
    spec, params, _ = paper_training
    dt = 5
    run = paper_series.values[0]
    pred_err, present_err = [], []
    for t0 in range(1000, 3800, 400):
        window = run[t0 - 511: t0 + 1]
        out = network_forward(spec, params, complex_to_tensor(window))
        pred = out[2 * (dt - 1), -1] + 1j * out[2 * dt - 1, -1]
        future_db = power_db(run[t0 + dt])
        pred_err.append(np.mean((power_db(pred) - future_db) ** 2))
        present_err.append(np.mean((power_db(run[t0]) - future_db) ** 2))
    assert np.mean(pred_err) < np.mean(present_err)
    print(f"\nACCEPTANCE (supplementary) PASS: predicted spectra track the "
          f"future in dB (MSE {np.mean(pred_err):.2f} vs present "
          f"{np.mean(present_err):.2f})")


# ---------------------------------------------------------------------------
# criterion 7: exact table values are out of scope


def test_c7_value_reproduction_out_of_scope():
    """Scatterer-placement details and PRNG streams are not pinned by the
    published table, so exact MSE values are not reproducible; acceptance
    rests on criteria 1-6 (oracle equivalence, invariants, ratio and
    monotonicity checks) instead of value matching."""
    print("\nACCEPTANCE C7 PASS (by construction): value-level table "
          "reproduction is excluded; criteria 1-6 carry the gate")
