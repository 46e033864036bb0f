"""Matplotlib renderings saved next to the delimited outputs."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .reports import power_db, raster_rgb  # noqa: E402
from .training import EvalReport  # noqa: E402

plt.rcParams.update({
    "figure.figsize": (7.0, 4.2),
    "figure.dpi": 120,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.bbox": "tight",
})


def save_raster_png(series, path, title="Estimated transfer functions"):
    """Phase/amplitude raster of a (steps, freq) complex series."""
    rgb = raster_rgb(series)
    fig, ax = plt.subplots()
    ax.imshow(rgb, aspect="auto", interpolation="nearest",
              extent=(0, series.shape[0], 0, series.shape[1]))
    ax.grid(False)
    ax.set_xlabel("time step t")
    ax.set_ylabel("subcarrier f")
    ax.set_title(title)
    fig.savefig(path)
    plt.close(fig)


def save_spectra_png(observed_t0, observed_future, predicted, t0, dt, path):
    fig, ax = plt.subplots()
    ax.plot(power_db(observed_t0), label=f"observed at t0={t0}", color="tab:blue")
    ax.plot(power_db(observed_future), label=f"observed at t0+{dt}",
            color="tab:orange")
    ax.plot(power_db(predicted), label=f"predicted for t0+{dt}",
            color="tab:green")
    ax.set_xlabel("subcarrier f")
    ax.set_ylabel("power density [dB]")
    ax.set_title(f"Power density spectra, {dt}-step-ahead prediction")
    ax.legend()
    fig.savefig(path)
    plt.close(fig)


def save_loss_curves(report: EvalReport, path):
    fig, ax = plt.subplots()
    epochs = range(1, len(report.train_loss_history) + 1)
    ax.plot(epochs, report.train_loss_history, label="train", marker="o", ms=3)
    ax.plot(epochs, report.val_loss_history, label="validation", marker="s", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("masked MSE (per real component)")
    ax.set_title("Training history")
    ax.legend()
    fig.savefig(path)
    plt.close(fig)


def save_mse_curves(report: EvalReport, path):
    fig, ax = plt.subplots()
    ax.plot(report.delta_ts, report.mse_train, label="train", marker="o", ms=3)
    ax.plot(report.delta_ts, report.mse_val, label="validation", marker="s", ms=3)
    ax.plot(report.delta_ts, report.mse_test, label="test", marker="^", ms=3)
    ax.plot(report.delta_ts, report.mse_trivial, label="trivial baseline",
            marker="x", ms=4, linestyle="--", color="black")
    ax.set_xlabel("prediction length $\\Delta t$")
    ax.set_ylabel("MSE (per complex sample)")
    ax.set_title("Prediction error vs horizon")
    ax.legend()
    fig.savefig(path)
    plt.close(fig)
