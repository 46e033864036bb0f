"""Blockwise transfer-function estimation from test-signal transmissions.

Per block a constant-magnitude random-phase test signal is transmitted;
dividing received by transmitted spectrum gives the raw estimate.  Its
impulse response is windowed to the first half block (the channel's
delays all live there; the second half is a noisy tail) and the windowed
spectrum is downsampled by two, leaving n_samples/2 usable bins.

Container format CTFS0001 (little-endian):
    8 bytes   magic "CTFS0001"
    3 x u32   n_runs, n_steps, n_freq
    payload   n_runs*n_steps*n_freq complex values, float64 (re, im)
              interleaved, row-major (run, step, freq)
A JSON sidecar at <path>.json echoes the configuration and seeds.
"""

import dataclasses
import json
import struct
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataFormatError, ValidationError
from .fourier import fft, ifft
from .simulation import (SimConfig, Signal, advance, apply_channel,
                         init_simulation, snapshot)

CTFS_MAGIC = b"CTFS0001"


@dataclass
class TestSignal:
    time: Signal             # length-N complex block, mean power 1
    spectrum: np.ndarray     # constant magnitude sqrt(N), phases U(-pi, pi)


@dataclass
class TransferEstimate:
    values: np.ndarray       # length N/2 complex
    time_index: int


@dataclass
class EstimateSeries:
    values: np.ndarray                  # (n_runs, n_steps, n_freq) complex128
    config: SimConfig | None = None
    seeds: list | None = None
    metadata: dict | None = None

    @property
    def n_runs(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    @property
    def n_freq(self) -> int:
        return self.values.shape[2]


def gen_test_signal(n: int, rng: np.random.Generator,
                    sample_rate: float = 25.6e6) -> TestSignal:
    """Spectrum magnitude sqrt(n) (unit mean time-domain power), i.i.d.
    uniform phases."""
    phases = rng.uniform(-np.pi, np.pi, n)
    spectrum = np.sqrt(n) * np.exp(1j * phases)
    return TestSignal(time=Signal(samples=ifft(spectrum), sample_rate=sample_rate),
                      spectrum=spectrum)


def raw_estimate(fr: np.ndarray, fs: np.ndarray) -> np.ndarray:
    """First-step estimate: elementwise received/transmitted spectrum."""
    fr = np.asarray(fr)
    fs = np.asarray(fs)
    if fr.shape != fs.shape:
        raise ValidationError(f"spectrum shapes differ: {fr.shape} vs {fs.shape}")
    if np.min(np.abs(fs)) == 0.0:
        raise ValidationError("test-signal spectrum contains a zero bin")
    return fr / fs


def window_impulse_response(raw: np.ndarray) -> np.ndarray:
    """Zero the second half of the impulse response; return the windowed
    spectrum at full resolution (idempotent)."""
    h = ifft(raw)
    h[..., h.shape[-1] // 2:] = 0.0
    return fft(h)


def refine_estimate(raw: np.ndarray, time_index: int = 0) -> TransferEstimate:
    """Window the impulse response to [0, N/2) and keep every second bin."""
    windowed = window_impulse_response(raw)
    return TransferEstimate(values=windowed[..., ::2], time_index=time_index)


def estimate_single_run(config: SimConfig, base_seed: int, run_index: int,
                        noiseless: bool = False,
                        include_doppler: bool = True) -> np.ndarray:
    """One simulation run: per block, generate a fresh test signal,
    transmit, estimate, refine, advance.  Returns (n_steps, N/2) complex.

    Run r uses seed [base_seed, r] for the scatterer field and
    [base_seed, r, 1] for per-block test signals and noise, so the output
    is bit-reproducible from (config, base_seed, r) alone.
    """
    n = config.n_samples
    out = np.empty((config.n_steps, n // 2), dtype=np.complex128)
    state = init_simulation(config, seed=[base_seed, run_index])
    rng = np.random.default_rng([base_seed, run_index, 1])
    for t in range(config.n_steps):
        try:
            snap = snapshot(state)
            ts = gen_test_signal(n, rng, config.sample_rate)
            rx = apply_channel(snap, ts.time, rng, noiseless=noiseless,
                               snr_db=config.snr_db,
                               include_doppler=include_doppler)
            fr = fft(rx.samples)
            out[t] = refine_estimate(raw_estimate(fr, ts.spectrum), t).values
        except Exception as exc:
            raise type(exc)(f"run {run_index} step {t}: {exc}") from exc
        state = advance(state)
    return out


def run_estimation_campaign(config: SimConfig, n_runs: int = 16,
                            seed: int | None = None, *,
                            noiseless: bool = False,
                            include_doppler: bool = True,
                            progress=None) -> EstimateSeries:
    """Independent simulation runs, one refined estimate per block."""
    config.validate()
    base_seed = config.seed if seed is None else seed
    n = config.n_samples
    out = np.empty((n_runs, config.n_steps, n // 2), dtype=np.complex128)
    seeds = [[base_seed, r] for r in range(n_runs)]

    for r in range(n_runs):
        out[r] = estimate_single_run(config, base_seed, r, noiseless,
                                     include_doppler)
        if progress is not None:
            progress(r + 1, n_runs)

    metadata = {
        "noiseless": bool(noiseless),
        "include_doppler": bool(include_doppler),
        "created": datetime.now(timezone.utc).isoformat(),
        "tool_version": __version__,
    }
    return EstimateSeries(values=out, config=config, seeds=seeds,
                          metadata=metadata)


def write_ctfs(series: EstimateSeries, path) -> None:
    """Write the CTFS0001 container plus its JSON sidecar."""
    path = Path(path)
    arr = np.ascontiguousarray(series.values, dtype="<c16")
    n_runs, n_steps, n_freq = arr.shape
    with open(path, "wb") as fh:
        fh.write(CTFS_MAGIC)
        fh.write(struct.pack("<III", n_runs, n_steps, n_freq))
        fh.write(arr.tobytes())
    sidecar = {
        "format": CTFS_MAGIC.decode(),
        "n_runs": n_runs,
        "n_steps": n_steps,
        "n_freq": n_freq,
        "config": dataclasses.asdict(series.config) if series.config else None,
        "seeds": series.seeds,
    }
    if series.metadata:
        sidecar.update(series.metadata)
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, default=str)
        fh.write("\n")


def read_ctfs(path) -> EstimateSeries:
    """Read a CTFS0001 container; sidecar metadata is optional."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CTFS_MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r}")
        header = fh.read(12)
        if len(header) != 12:
            raise DataFormatError(f"{path}: truncated header")
        n_runs, n_steps, n_freq = struct.unpack("<III", header)
        payload = fh.read()
    expected = n_runs * n_steps * n_freq * 16
    if len(payload) != expected:
        raise DataFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}")
    values = np.frombuffer(payload, dtype="<c16").reshape(n_runs, n_steps, n_freq)
    values = values.astype(np.complex128)

    config = None
    seeds = None
    metadata = None
    sidecar_path = Path(str(path) + ".json")
    if sidecar_path.exists():
        with open(sidecar_path) as fh:
            meta = json.load(fh)
        seeds = meta.get("seeds")
        metadata = {k: v for k, v in meta.items()
                    if k not in ("config", "seeds")}
        raw_cfg = meta.get("config")
        if raw_cfg:
            known = {f.name for f in dataclasses.fields(SimConfig)}
            kwargs = {k: v for k, v in raw_cfg.items() if k in known}
            for tup in ("receiver_start", "tx_position"):
                if tup in kwargs and kwargs[tup] is not None:
                    kwargs[tup] = tuple(kwargs[tup])
            config = SimConfig(**kwargs)
    return EstimateSeries(values=values, config=config, seeds=seeds,
                          metadata=metadata)
