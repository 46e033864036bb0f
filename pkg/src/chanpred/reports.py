"""Delimited report outputs: MSE tables, phase/amplitude rasters, spectra.

Raster convention: width = time steps, height = subcarriers (index 0 at
the bottom row), hue encodes phase (red = 0, cyan = pi, full hue circle
over 2 pi), brightness encodes amplitude normalised to the series
maximum.  Rasters are written as binary PPM (P6), bit-exact and
dependency-free.

Spectra tables hold power densities 10*log10(|value|^2) in dB, floored
at -60 dB so exact nulls stay finite.
"""

import csv
import json
from dataclasses import asdict

import numpy as np

from .errors import ValidationError
from .training import EvalReport

DB_FLOOR = -60.0


def write_report_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["delta_t", "mse_train", "mse_val", "mse_test", "mse_trivial"])
        for i, dt in enumerate(report.delta_ts):
            w.writerow([dt,
                        f"{report.mse_train[i]:.6f}",
                        f"{report.mse_val[i]:.6f}",
                        f"{report.mse_test[i]:.6f}",
                        f"{report.mse_trivial[i]:.6f}"])


def write_report_json(report: EvalReport, path) -> None:
    doc = asdict(report)
    # per-component figures alongside the per-complex-sample convention
    for key in ("mse_train", "mse_val", "mse_test", "mse_trivial"):
        doc[key + "_per_component"] = [v / 2.0 for v in doc[key]]
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def complex_to_rgb(values: np.ndarray) -> np.ndarray:
    """Map a complex array to uint8 RGB: hue from phase, value from
    amplitude relative to the array maximum (saturation fixed at 1)."""
    amp = np.abs(values)
    peak = amp.max()
    v = amp / peak if peak > 0 else np.zeros_like(amp)
    h6 = (np.angle(values) % (2.0 * np.pi)) / (2.0 * np.pi) * 6.0
    x = v * (1.0 - np.abs(h6 % 2.0 - 1.0))
    z = np.zeros_like(v)
    sector = np.floor(h6).astype(int) % 6
    r = np.select([sector == 0, sector == 1, sector == 2,
                   sector == 3, sector == 4, sector == 5],
                  [v, x, z, z, x, v])
    g = np.select([sector == 0, sector == 1, sector == 2,
                   sector == 3, sector == 4, sector == 5],
                  [x, v, v, x, z, z])
    b = np.select([sector == 0, sector == 1, sector == 2,
                   sector == 3, sector == 4, sector == 5],
                  [z, z, x, v, v, x])
    rgb = np.stack([r, g, b], axis=-1)
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)


def raster_rgb(series: np.ndarray) -> np.ndarray:
    """(steps, freq) complex -> (freq, steps, 3) uint8 with subcarrier 0
    on the bottom row."""
    if series.ndim != 2:
        raise ValidationError(f"expected a 2-D series, got shape {series.shape}")
    return complex_to_rgb(series.T[::-1, :])


def write_ppm(rgb: np.ndarray, path) -> None:
    """Binary PPM (P6) with max value 255."""
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValidationError("PPM writer expects (height, width, 3) uint8")
    height, width, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode())
        fh.write(rgb.tobytes())


def power_db(values: np.ndarray, floor: float = DB_FLOOR) -> np.ndarray:
    power = np.abs(values) ** 2
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(power)
    return np.maximum(db, floor)


def write_spectra_csv(path, observed_t0: np.ndarray, observed_future: np.ndarray,
                      predicted: np.ndarray) -> None:
    """Columns (f, observed_t0, observed_t0+dt, predicted), all in dB."""
    n = len(observed_t0)
    if len(observed_future) != n or len(predicted) != n:
        raise ValidationError("spectra columns must have equal length")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["f", "observed_t0", "observed_future", "predicted"])
        for f in range(n):
            w.writerow([f,
                        f"{power_db(observed_t0[f:f+1])[0]:.4f}",
                        f"{power_db(observed_future[f:f+1])[0]:.4f}",
                        f"{power_db(predicted[f:f+1])[0]:.4f}"])
