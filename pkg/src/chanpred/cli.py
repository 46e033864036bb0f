"""Command-line front end.

Subcommands: simulate, train, evaluate, gradcheck, render.  Configuration
comes from JSON files whose keys mirror the SimConfig / TrainConfig field
names; command-line flags override file values.  Every command writes a
manifest JSON capturing the resolved configuration, seeds and output
digests, which together with the tool version suffices to reproduce each
artifact byte for byte.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 validation
or data-format error, 5 acceptance-gate failure (gradcheck).
"""

import argparse
import dataclasses
import hashlib
import json
import multiprocessing
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DataFormatError, ValidationError
from .estimation import (EstimateSeries, estimate_single_run, read_ctfs,
                         run_estimation_campaign, write_ctfs)
from .network import (NetworkSpec, grad_check, init_params, load_checkpoint,
                      network_forward, save_checkpoint)
from .simulation import SimConfig
from .training import (EvalReport, TrainConfig, build_dataset,
                       complex_to_tensor, evaluate_table, train,
                       trivial_baseline_mse)
from . import figures, reports

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_VALIDATION = 4
EXIT_GATE = 5

GRADCHECK_TOLERANCE = 1e-5
GRADCHECK_SHAPE = (40, 12)   # (time, freq) probe instance
GRADCHECK_M = 2


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def _config_from_file(cls, path):
    data = _load_json(path) if path else {}
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    for tup in ("receiver_start", "tx_position"):
        if tup in data and data[tup] is not None:
            data[tup] = tuple(data[tup])
    return cls(**data)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(path, command: str, settings: dict, inputs: list,
                    outputs: list) -> None:
    doc = {
        "tool": "chanpred",
        "version": __version__,
        "created": datetime.now(timezone.utc).isoformat(),
        "command": command,
        "settings": settings,
        "inputs": [{"path": str(p), "sha256": _sha256(p)} for p in inputs],
        "outputs": [{"path": str(p), "sha256": _sha256(p)} for p in outputs],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, default=str)
        fh.write("\n")


# ---------------------------------------------------------------------------
# simulate


def _run_worker(job):
    cfg, base_seed, run_index, noiseless, include_doppler = job
    return run_index, estimate_single_run(cfg, base_seed, run_index,
                                          noiseless, include_doppler)


def cmd_simulate(args) -> int:
    cfg = _config_from_file(SimConfig, args.config)
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, n_steps=args.steps)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    cfg.validate()
    n_runs = args.runs
    include_doppler = not args.freeze_block

    if args.workers > 1:
        jobs = [(cfg, cfg.seed, r, args.noiseless, include_doppler)
                for r in range(n_runs)]
        values = np.empty((n_runs, cfg.n_steps, cfg.n_samples // 2),
                          dtype=np.complex128)
        with multiprocessing.Pool(args.workers) as pool:
            for r, arr in pool.imap_unordered(_run_worker, jobs):
                values[r] = arr
                print(f"run {r} done", flush=True)
        metadata = {"noiseless": bool(args.noiseless),
                    "include_doppler": include_doppler,
                    "created": datetime.now(timezone.utc).isoformat(),
                    "tool_version": __version__}
        series = EstimateSeries(values=values, config=cfg,
                                seeds=[[cfg.seed, r] for r in range(n_runs)],
                                metadata=metadata)
    else:
        series = run_estimation_campaign(
            cfg, n_runs=n_runs, noiseless=args.noiseless,
            include_doppler=include_doppler,
            progress=lambda done, total: print(f"run {done}/{total} done",
                                               flush=True))
    out = Path(args.out)
    write_ctfs(series, out)
    _write_manifest(str(out) + ".manifest.json", "simulate",
                    {"config": dataclasses.asdict(cfg), "runs": n_runs,
                     "noiseless": args.noiseless,
                     "include_doppler": include_doppler},
                    inputs=[], outputs=[out, Path(str(out) + ".json")])
    print(f"wrote {out} ({n_runs} x {cfg.n_steps} x {cfg.n_samples // 2})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / evaluate


def _emit_report(report: EvalReport, base: Path, with_loss: bool) -> list:
    csv_path = base.with_suffix(".csv")
    json_path = base.with_suffix(".json")
    reports.write_report_csv(report, csv_path)
    reports.write_report_json(report, json_path)
    outputs = [csv_path, json_path]
    mse_png = base.parent / (base.name + "_mse.png")
    figures.save_mse_curves(report, mse_png)
    outputs.append(mse_png)
    if with_loss and report.train_loss_history:
        loss_png = base.parent / (base.name + "_loss.png")
        figures.save_loss_curves(report, loss_png)
        outputs.append(loss_png)
    return outputs


def cmd_train(args) -> int:
    tc = _config_from_file(TrainConfig, args.config)
    if args.epochs is not None:
        tc = dataclasses.replace(tc, epochs=args.epochs)
    if args.lr is not None:
        tc = dataclasses.replace(tc, learning_rate=args.lr)
    if args.m is not None:
        tc = dataclasses.replace(tc, m=args.m)
    if args.seed is not None:
        tc = dataclasses.replace(tc, seed=args.seed)
    tc.validate()

    series = read_ctfs(args.data)
    dataset = build_dataset(series, seed=tc.seed, segment_len=tc.segment_len)
    spec = NetworkSpec.default(m=tc.m)

    def progress(epoch, pos, total, loss):
        if pos == total:
            print(f"epoch {epoch + 1}/{tc.epochs}: last segment loss {loss:.5f}",
                  flush=True)

    params, report = train(spec, dataset, tc, progress=progress)

    out = Path(args.out)
    save_checkpoint(out, spec, params, step_count=tc.epochs * len(dataset.train),
                    seed=tc.seed,
                    extra={"dataset": str(args.data), "dataset_seed": tc.seed,
                           "epochs": tc.epochs,
                           "learning_rate": tc.learning_rate,
                           "segment_len": tc.segment_len,
                           "tool_version": __version__})
    base = Path(args.report) if args.report else out.parent / (out.stem + "_report")
    outputs = [out] + _emit_report(report, base, with_loss=True)
    _write_manifest(str(out) + ".manifest.json", "train",
                    {"train_config": dataclasses.asdict(tc)},
                    inputs=[Path(args.data)], outputs=outputs)
    for i, dt in enumerate(report.delta_ts):
        print(f"dt={dt}: train={report.mse_train[i]:.4f} "
              f"val={report.mse_val[i]:.4f} test={report.mse_test[i]:.4f} "
              f"trivial={report.mse_trivial[i]:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    spec, params, header = load_checkpoint(args.model)
    series = read_ctfs(args.data)
    seed = args.seed if args.seed is not None else header.get("dataset_seed", 0)
    segment_len = header.get("segment_len", 512)
    dataset = build_dataset(series, seed=seed, segment_len=segment_len)
    report = EvalReport(
        delta_ts=list(range(1, spec.m + 1)),
        mse_train=evaluate_table(spec, params, dataset.train),
        mse_val=evaluate_table(spec, params, dataset.val),
        mse_test=evaluate_table(spec, params, dataset.test),
        mse_trivial=[trivial_baseline_mse(dataset.test, dt)
                     for dt in range(1, spec.m + 1)],
        info={"model": str(args.model), "dataset_seed": seed},
    )
    base = Path(args.out) if args.out else Path(args.model).parent / "eval_report"
    outputs = _emit_report(report, base, with_loss=False)
    _write_manifest(str(base) + ".manifest.json", "evaluate",
                    {"dataset_seed": seed},
                    inputs=[Path(args.data), Path(args.model)], outputs=outputs)
    for i, dt in enumerate(report.delta_ts):
        print(f"dt={dt}: train={report.mse_train[i]:.4f} "
              f"val={report.mse_val[i]:.4f} test={report.mse_test[i]:.4f} "
              f"trivial={report.mse_trivial[i]:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def gradcheck_instance(seed: int):
    """Fixed probe instance: default layout with m=2 on a (2, 40, 12) input."""
    rng = np.random.default_rng(seed)
    spec = NetworkSpec.default(m=GRADCHECK_M)
    params = init_params(spec, rng)
    t_len, f_len = GRADCHECK_SHAPE
    x = rng.normal(0.0, 1.0, (2, t_len, f_len))
    target = rng.normal(0.0, 1.0, (2 * GRADCHECK_M, t_len, f_len))
    return spec, params, x, target


def cmd_gradcheck(args) -> int:
    worst = 0.0
    for seed in args.seeds:
        spec, params, x, target = gradcheck_instance(seed)
        maxerr, per_layer = grad_check(spec, params, x, target,
                                       negate_analytic=args.inject_bug)
        worst = max(worst, maxerr)
        layers = "  ".join(f"L{i}={e:.2e}" for i, e in enumerate(per_layer))
        print(f"seed {seed}: max rel err {maxerr:.3e}  [{layers}]", flush=True)
    ok = worst < args.tolerance
    print(f"gradcheck {'PASS' if ok else 'FAIL'}: "
          f"max relative error {worst:.3e} (gate {args.tolerance:g})")
    return EXIT_OK if ok else EXIT_GATE


# ---------------------------------------------------------------------------
# render


def cmd_render(args) -> int:
    series = read_ctfs(args.data)
    if not 0 <= args.run < series.n_runs:
        raise ValidationError(f"run {args.run} out of range 0..{series.n_runs - 1}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    run_values = series.values[args.run]
    outputs = []

    if args.mode == "raster":
        rgb = reports.raster_rgb(run_values)
        ppm = out_dir / f"raster_run{args.run}.ppm"
        png = out_dir / f"raster_run{args.run}.png"
        reports.write_ppm(rgb, ppm)
        figures.save_raster_png(run_values, png)
        outputs += [ppm, png]
    else:  # spectra
        if args.model is None:
            raise ValidationError("spectra mode requires --model")
        if args.t0 is None:
            raise ValidationError("spectra mode requires --t0")
        spec, params, _ = load_checkpoint(args.model)
        dt = args.dt
        if not 1 <= dt <= spec.m:
            raise ValidationError(f"dt={dt} outside the model horizon 1..{spec.m}")
        t0 = args.t0
        if t0 < 0 or t0 + dt >= series.n_steps:
            raise ValidationError(
                f"t0+dt must lie inside the series (t0={t0}, dt={dt}, "
                f"steps={series.n_steps})")
        start = max(0, t0 - 511)
        window = run_values[start:t0 + 1]
        out = network_forward(spec, params, complex_to_tensor(window))
        pred = out[2 * (dt - 1), -1] + 1j * out[2 * dt - 1, -1]
        observed_t0 = run_values[t0]
        observed_future = run_values[t0 + dt]
        csv_path = out_dir / f"spectra_run{args.run}_t{t0}_dt{dt}.csv"
        png_path = out_dir / f"spectra_run{args.run}_t{t0}_dt{dt}.png"
        reports.write_spectra_csv(csv_path, observed_t0, observed_future, pred)
        figures.save_spectra_png(observed_t0, observed_future, pred, t0, dt,
                                 png_path)
        outputs += [csv_path, png_path]

    inputs = [Path(args.data)] + ([Path(args.model)] if args.model else [])
    _write_manifest(out_dir / "manifest.json", "render",
                    {"mode": args.mode, "run": args.run, "t0": args.t0,
                     "dt": args.dt},
                    inputs=inputs, outputs=outputs)
    for p in outputs:
        print(f"wrote {p}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="chanpred",
        description="Multipath channel simulation, estimation and prediction")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("simulate", help="run the simulation + estimation "
                        "campaign and write a CTFS container")
    ps.add_argument("--config", help="JSON file with SimConfig fields")
    ps.add_argument("--out", required=True, help="output CTFS path")
    ps.add_argument("--runs", type=int, default=16)
    ps.add_argument("--steps", type=int, help="override n_steps")
    ps.add_argument("--seed", type=int, help="override base seed")
    ps.add_argument("--noiseless", action="store_true",
                    help="disable receiver noise")
    ps.add_argument("--freeze-block", action="store_true",
                    help="evaluate the channel frozen at each block start "
                         "(no within-block Doppler rotation)")
    ps.add_argument("--workers", type=int, default=1,
                    help="parallel worker processes over runs")
    ps.set_defaults(func=cmd_simulate)

    pt = sub.add_parser("train", help="train the predictor on a CTFS dataset")
    pt.add_argument("--data", required=True, help="CTFS dataset path")
    pt.add_argument("--out", required=True, help="output checkpoint path")
    pt.add_argument("--config", help="JSON file with TrainConfig fields")
    pt.add_argument("--epochs", type=int)
    pt.add_argument("--lr", type=float)
    pt.add_argument("--m", type=int, help="prediction horizon")
    pt.add_argument("--seed", type=int)
    pt.add_argument("--report", help="report basename (default <out>_report)")
    pt.set_defaults(func=cmd_train)

    pe = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    pe.add_argument("--data", required=True)
    pe.add_argument("--model", required=True)
    pe.add_argument("--out", help="report basename")
    pe.add_argument("--seed", type=int, help="override the dataset split seed")
    pe.set_defaults(func=cmd_evaluate)

    pg = sub.add_parser("gradcheck", help="verify backpropagation against "
                        "finite differences")
    pg.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    pg.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE)
    pg.add_argument("--inject-bug", action="store_true",
                    help="negate the analytic gradients (harness self-test; "
                         "must FAIL)")
    pg.set_defaults(func=cmd_gradcheck)

    pr = sub.add_parser("render", help="render rasters or spectra from a "
                        "CTFS dataset")
    pr.add_argument("--data", required=True)
    pr.add_argument("--out-dir", required=True)
    pr.add_argument("--mode", choices=["raster", "spectra"], default="raster")
    pr.add_argument("--run", type=int, default=0)
    pr.add_argument("--t0", type=int, help="spectra: prediction anchor step")
    pr.add_argument("--dt", type=int, default=1, help="spectra: horizon")
    pr.add_argument("--model", help="spectra: CPNN checkpoint")
    pr.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
