"""Dataset assembly, training loop, and MSE evaluation.

Each simulation run's estimate series is cut into contiguous segments of
512 steps which are shuffled (seeded) and split 6:1:1 into train /
validation / test.  Runs with at least 8 segments are split per run so
every set sees every channel geometry; shorter runs are pooled before
splitting.  One optimisation step processes one segment (no batching).

MSE conventions: the training loss is the mean over valid real-valued
entries; all reported per-horizon MSEs are per complex sample (real plus
imaginary squared error), i.e. twice the per-component mean.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .estimation import EstimateSeries
from .network import (AdamState, LayerParams, NetworkSpec, adam_step,
                      _network_forward_cached, init_params, mse_loss,
                      network_backward, network_forward)

SEGMENT_LEN = 512


@dataclass
class Segment:
    grid: np.ndarray     # complex (seg_len, n_freq)
    run: int
    index: int           # segment position within its run


@dataclass
class DatasetSplit:
    train: list[Segment]
    val: list[Segment]
    test: list[Segment]

    def all_segments(self) -> list[Segment]:
        return self.train + self.val + self.test


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 30
    m: int = 10
    seed: int = 0
    segment_len: int = SEGMENT_LEN
    mask_policy: str = "target-overruns"   # only positions past the segment end

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.m < 1:
            raise ValidationError("m must be >= 1")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.mask_policy != "target-overruns":
            raise ValidationError(f"unknown mask policy {self.mask_policy!r}")


@dataclass
class EvalReport:
    delta_ts: list[int]
    mse_train: list[float]
    mse_val: list[float]
    mse_test: list[float]
    mse_trivial: list[float]
    train_loss_history: list[float] = field(default_factory=list)
    val_loss_history: list[float] = field(default_factory=list)
    info: dict = field(default_factory=dict)


def complex_to_tensor(grid: np.ndarray) -> np.ndarray:
    """(T, F) complex -> (2, T, F) float64 with channels (real, imag)."""
    return np.ascontiguousarray(
        np.stack([grid.real, grid.imag]).astype(np.float64))


def build_dataset(series: EstimateSeries, seed: int = 0,
                  segment_len: int = SEGMENT_LEN) -> DatasetSplit:
    """Deterministic seeded 6:1:1 split into train/val/test segments."""
    values = series.values
    if values.ndim != 3:
        raise ValidationError(f"expected (runs, steps, freq), got {values.shape}")
    n_runs, n_steps, _ = values.shape
    per_run = n_steps // segment_len
    if per_run < 1:
        raise ValidationError(
            f"runs of {n_steps} steps are too short for {segment_len}-step segments")

    rng = np.random.default_rng(seed)
    segments = [[Segment(grid=values[r, i * segment_len:(i + 1) * segment_len],
                         run=r, index=i)
                 for i in range(per_run)] for r in range(n_runs)]

    train: list[Segment] = []
    val: list[Segment] = []
    test: list[Segment] = []
    if per_run >= 8:
        n_train = (6 * per_run) // 8
        n_val = (per_run - n_train) // 2
        for r in range(n_runs):
            order = rng.permutation(per_run)
            shuffled = [segments[r][i] for i in order]
            train += shuffled[:n_train]
            val += shuffled[n_train:n_train + n_val]
            test += shuffled[n_train + n_val:]
    else:
        # too few segments per run for a per-run 6:1:1; pool across runs
        pool = [s for run in segments for s in run]
        order = rng.permutation(len(pool))
        shuffled = [pool[i] for i in order]
        n_val = max(1, len(pool) // 8)
        n_test = max(1, len(pool) // 8)
        if n_val + n_test >= len(pool):
            raise ValidationError("not enough segments for a 6:1:1 split")
        test += shuffled[:n_test]
        val += shuffled[n_test:n_test + n_val]
        train += shuffled[n_test + n_val:]
    return DatasetSplit(train=train, val=val, test=test)


def make_targets(segment: np.ndarray | Segment, m: int
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Input tensor, stacked shifted targets, and the validity mask.

    Target channel pair (2k, 2k+1) at time t holds the segment value at
    t + k + 1; positions reading past the segment end are masked out.
    Mask shape is (2m, T, 1) and broadcasts over frequency.
    """
    grid = segment.grid if isinstance(segment, Segment) else segment
    t_len, f_len = grid.shape
    if m >= t_len:
        raise ValidationError(f"horizon m={m} must be < segment length {t_len}")
    x = complex_to_tensor(grid)
    target = np.zeros((2 * m, t_len, f_len))
    mask = np.zeros((2 * m, t_len, 1), dtype=bool)
    for k in range(m):
        shift = k + 1
        target[2 * k, :t_len - shift] = grid.real[shift:]
        target[2 * k + 1, :t_len - shift] = grid.imag[shift:]
        mask[2 * k: 2 * k + 2, :t_len - shift] = True
    return x, target, mask


def evaluate_mse(spec: NetworkSpec, params: list[LayerParams],
                 segments: list[Segment], delta_t: int) -> float:
    """Per-complex-sample MSE of the delta_t-step-ahead prediction."""
    if not 1 <= delta_t <= spec.m:
        raise ValidationError(f"delta_t={delta_t} outside 1..{spec.m}")
    err = 0.0
    cnt = 0
    for seg in segments:
        out = network_forward(spec, params, complex_to_tensor(seg.grid))
        e, c = _horizon_error(out, seg.grid, delta_t)
        err += e
        cnt += c
    return err / cnt


def _horizon_error(out: np.ndarray, grid: np.ndarray,
                   delta_t: int) -> tuple[float, int]:
    pred = out[2 * (delta_t - 1)] + 1j * out[2 * delta_t - 1]
    diff = pred[:len(grid) - delta_t] - grid[delta_t:]
    return float((diff.real**2 + diff.imag**2).sum()), diff.size


def evaluate_table(spec: NetworkSpec, params: list[LayerParams],
                   segments: list[Segment]) -> list[float]:
    """All horizons with one forward pass per segment."""
    err = np.zeros(spec.m)
    cnt = np.zeros(spec.m, dtype=np.int64)
    for seg in segments:
        out = network_forward(spec, params, complex_to_tensor(seg.grid))
        for dt in range(1, spec.m + 1):
            e, c = _horizon_error(out, seg.grid, dt)
            err[dt - 1] += e
            cnt[dt - 1] += c
    return list(err / cnt)


def trivial_baseline_mse(segments: list[Segment], delta_t: int) -> float:
    """MSE of predicting value(t + delta_t) := value(t), per complex sample."""
    if delta_t < 1:
        raise ValidationError("delta_t must be >= 1")
    err = 0.0
    cnt = 0
    for seg in segments:
        grid = seg.grid if isinstance(seg, Segment) else seg
        if delta_t >= len(grid):
            raise ValidationError(
                f"delta_t={delta_t} too large for segment of {len(grid)} steps")
        diff = grid[delta_t:] - grid[:-delta_t]
        err += float((diff.real**2 + diff.imag**2).sum())
        cnt += diff.size
    return err / cnt


def _masked_loss(spec, params, seg: Segment, m: int) -> float:
    x, target, mask = make_targets(seg, m)
    out = network_forward(spec, params, x)
    return mse_loss(out, target, mask)[0]


def train(spec: NetworkSpec, dataset: DatasetSplit, config: TrainConfig,
          progress=None) -> tuple[list[LayerParams], EvalReport]:
    """Seeded-shuffle epochs, one forward/backward/ADAM step per segment.

    Records the per-epoch mean training loss and the post-epoch validation
    loss (both per real component).  Aborts on a non-finite loss.
    """
    config.validate()
    if 2 * config.m != spec.layers[-1].out_ch:
        raise ValidationError(
            f"network emits {spec.layers[-1].out_ch} channels, need 2*m={2 * config.m}")
    rng = np.random.default_rng(config.seed)
    params = init_params(spec, rng)
    adam = AdamState.zeros_like(params)

    train_hist: list[float] = []
    val_hist: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset.train))
        epoch_losses = []
        for pos, idx in enumerate(order):
            seg = dataset.train[idx]
            x, target, mask = make_targets(seg, config.m)
            out, inputs, acts, colss = _network_forward_cached(
                spec, params, x, keep_cols=True)
            loss, dloss = mse_loss(out, target, mask)
            if not np.isfinite(loss):
                raise ValidationError(
                    f"non-finite loss at epoch {epoch} segment {idx} "
                    f"(run {seg.run}, index {seg.index})")
            grads, _ = network_backward(spec, params, x, dloss,
                                        (out, inputs, acts, colss))
            adam_step(params, grads, adam, lr=config.learning_rate)
            epoch_losses.append(loss)
            if progress is not None:
                progress(epoch, pos + 1, len(order), loss)
        train_hist.append(float(np.mean(epoch_losses)))
        val_hist.append(float(np.mean([_masked_loss(spec, params, s, config.m)
                                       for s in dataset.val])))

    report = EvalReport(
        delta_ts=list(range(1, config.m + 1)),
        mse_train=evaluate_table(spec, params, dataset.train),
        mse_val=evaluate_table(spec, params, dataset.val),
        mse_test=evaluate_table(spec, params, dataset.test),
        mse_trivial=[trivial_baseline_mse(dataset.test, dt)
                     for dt in range(1, config.m + 1)],
        train_loss_history=train_hist,
        val_loss_history=val_hist,
        info={"epochs": config.epochs, "learning_rate": config.learning_rate,
              "m": config.m, "seed": config.seed,
              "n_train": len(dataset.train), "n_val": len(dataset.val),
              "n_test": len(dataset.test)},
    )
    return params, report
