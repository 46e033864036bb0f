"""Time-variant multipath channel simulator.

A transmitter at a fixed position illuminates a field of point scatterers;
the receiver moves at constant speed with a random heading.  Every
scatterer contributes one propagation path whose delay, phase offset,
Doppler frequency and free-space amplitude follow from the reflected path
length and its time derivative.  Per discrete time step (one transmission
block) the channel is frozen up to a linear within-block Doppler phase.

Scatterers are placed so that the excess-delay histogram follows a
truncated-exponential typical-urban power delay profile: the excess delay
is drawn from Exponential(excess_delay_mean) truncated to
[0, excess_delay_max] and the scatterer sits uniformly by angle on the
ellipse with foci at transmitter and receiver whose string length matches
the drawn total path length.

All quantities are SI base units; all arithmetic is 64-bit.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ValidationError

SPEED_OF_LIGHT = 299792458.0

# scatterers closer than this to either link end are re-placed
_MIN_FOCUS_CLEARANCE = 1e-3
_PLACEMENT_ROUNDS = 64


@dataclass
class SimConfig:
    f_carrier: float = 9.0e8            # Hz
    c0: float = SPEED_OF_LIGHT          # m/s
    n_scatterers: int = 256
    n_moving: int = 64                  # scatterers 0..n_moving-1 move, rest static
    scatterer_vel_std: float = 10.0     # m/s per velocity component
    receiver_speed: float = 10.0        # m/s, heading ~ U(-pi, pi)
    receiver_start: tuple[float, float] = (400.0, 0.0)
    tx_position: tuple[float, float] = (0.0, 0.0)
    block_period: float = 500e-6        # s, one transmission block = one time step
    n_steps: int = 4096
    bandwidth: float = 12.8e6           # Hz
    test_duration: float = 20e-6        # s, leading test-signal interval per block
    n_samples: int = 512                # samples per test interval
    snr_db: float | None = 12.0         # None disables noise
    sinc_halfwidth: int = 8             # pulse-shaping kernel support in samples
    excess_delay_mean: float = 1e-6     # s, exponential profile mean
    excess_delay_max: float = 7e-6      # s, profile truncation
    seed: int = 0

    @property
    def sample_rate(self) -> float:
        return self.n_samples / self.test_duration

    def validate(self) -> None:
        if self.n_scatterers < 1 or self.n_moving < 0:
            raise ConfigError("scatterer counts must be positive")
        if self.n_moving > self.n_scatterers:
            raise ConfigError("n_moving exceeds n_scatterers")
        for name in ("f_carrier", "c0", "block_period", "bandwidth",
                     "test_duration", "excess_delay_mean"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be strictly positive")
        if self.scatterer_vel_std < 0 or self.receiver_speed < 0:
            raise ConfigError("speeds must be non-negative")
        if self.n_steps < 1 or self.n_samples < 1:
            raise ConfigError("n_steps and n_samples must be positive")
        if self.n_samples & (self.n_samples - 1):
            raise ConfigError("n_samples must be a power of two")
        if self.excess_delay_max < 0:
            raise ConfigError("excess_delay_max must be non-negative")
        # test interval must be critically sampled at twice the bandwidth
        if abs(self.n_samples - 2.0 * self.bandwidth * self.test_duration) > 1e-6:
            raise ConfigError(
                "n_samples / test_duration must equal 2 * bandwidth "
                f"(got {self.n_samples / self.test_duration:.6g} vs "
                f"{2.0 * self.bandwidth:.6g})")
        tx = np.asarray(self.tx_position, dtype=float)
        rx = np.asarray(self.receiver_start, dtype=float)
        if np.hypot(*(rx - tx)) <= _MIN_FOCUS_CLEARANCE:
            raise ConfigError("receiver_start coincides with tx_position")


@dataclass
class Scatterer:
    position: np.ndarray   # (2,) m
    velocity: np.ndarray   # (2,) m/s, time-invariant


@dataclass
class ReceiverState:
    position: np.ndarray   # (2,) m
    velocity: np.ndarray   # (2,) m/s, |v| = receiver_speed


@dataclass
class PathParams:
    l: float       # reflected path length, m
    dl_dt: float   # rate of change of path length, m/s
    sigma: float   # delay, s
    theta: float   # phase offset in [0, 2*pi)
    f_d: float     # Doppler frequency, Hz
    a: float       # free-space amplitude


@dataclass
class SimState:
    """Positions are materialised closed-form as p0 + v * (t * block_period).

    This keeps single-step advancing and whole-trajectory evaluation
    bit-identical, which the reproducibility guarantees rely on.
    """
    config: SimConfig
    scat_pos0: np.ndarray   # (n, 2)
    scat_vel: np.ndarray    # (n, 2)
    rx_pos0: np.ndarray     # (2,)
    rx_vel: np.ndarray      # (2,)
    t: int = 0

    def scatterer_positions(self, t: int | None = None) -> np.ndarray:
        ti = self.t if t is None else t
        return self.scat_pos0 + self.scat_vel * (ti * self.config.block_period)

    def receiver(self, t: int | None = None) -> ReceiverState:
        ti = self.t if t is None else t
        pos = self.rx_pos0 + self.rx_vel * (ti * self.config.block_period)
        return ReceiverState(position=pos, velocity=self.rx_vel.copy())

    def scatterer(self, i: int) -> Scatterer:
        return Scatterer(position=self.scatterer_positions()[i],
                         velocity=self.scat_vel[i].copy())


@dataclass
class ChannelSnapshot:
    """All 256 path parameters frozen at one time step, plus the power
    normalisation constant making sum((norm * a_i)^2) == 1."""
    time_index: int
    l: np.ndarray        # (n,)
    dl_dt: np.ndarray    # (n,)
    delay: np.ndarray    # (n,) s
    theta: np.ndarray    # (n,) rad
    doppler: np.ndarray  # (n,) Hz
    amplitude: np.ndarray  # (n,)
    norm: float
    sample_rate: float
    sinc_halfwidth: int

    def path(self, i: int) -> PathParams:
        return PathParams(l=float(self.l[i]), dl_dt=float(self.dl_dt[i]),
                          sigma=float(self.delay[i]), theta=float(self.theta[i]),
                          f_d=float(self.doppler[i]), a=float(self.amplitude[i]))


@dataclass
class Signal:
    samples: np.ndarray   # complex, length n_samples
    sample_rate: float


def _sample_truncated_exp(rng: np.random.Generator, mean: float, upper: float,
                          size: int) -> np.ndarray:
    """Inverse-CDF sampling of Exponential(mean) truncated to [0, upper]."""
    u = rng.uniform(0.0, 1.0, size)
    if upper <= 0.0:
        return np.zeros(size)
    return -mean * np.log1p(-u * (1.0 - np.exp(-upper / mean)))


def init_simulation(config: SimConfig, seed: int | None = None) -> SimState:
    """Place scatterers on the delay-profile ellipses and draw all velocities.

    Draw order (fixed for reproducibility): excess delays, ellipse angles,
    scatterer velocities, receiver heading.  Scatterers falling within
    1 mm of either link end are re-drawn; after a bounded number of rounds
    the configuration is rejected.
    """
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    n = config.n_scatterers

    tx = np.asarray(config.tx_position, dtype=float)
    rx = np.asarray(config.receiver_start, dtype=float)
    base = rx - tx
    base_len = np.hypot(*base)
    u_axis = base / base_len
    u_perp = np.array([-u_axis[1], u_axis[0]])
    center = (tx + rx) / 2.0
    c_foc = base_len / 2.0

    delta_tau = _sample_truncated_exp(rng, config.excess_delay_mean,
                                      config.excess_delay_max, n)
    phi = rng.uniform(0.0, 2.0 * np.pi, n)

    positions = np.empty((n, 2))
    pending = np.arange(n)
    for _ in range(_PLACEMENT_ROUNDS):
        a_ell = (base_len + config.c0 * delta_tau[pending]) / 2.0
        b_ell = np.sqrt(np.maximum(a_ell**2 - c_foc**2, 0.0))
        pts = (center
               + (a_ell * np.cos(phi[pending]))[:, None] * u_axis
               + (b_ell * np.sin(phi[pending]))[:, None] * u_perp)
        positions[pending] = pts
        # focal radii of the ellipse point: a +- c*cos(phi)
        clearance = a_ell - c_foc * np.abs(np.cos(phi[pending]))
        bad = clearance < _MIN_FOCUS_CLEARANCE
        if not bad.any():
            pending = pending[:0]
            break
        pending = pending[bad]
        delta_tau[pending] = _sample_truncated_exp(
            rng, config.excess_delay_mean, config.excess_delay_max, len(pending))
        phi[pending] = rng.uniform(0.0, 2.0 * np.pi, len(pending))
    if len(pending):
        raise ConfigError(
            f"could not place {len(pending)} scatterers clear of the link ends "
            f"after {_PLACEMENT_ROUNDS} rounds")

    vel = np.zeros((n, 2))
    if config.n_moving:
        vel[:config.n_moving] = rng.normal(
            0.0, config.scatterer_vel_std, (config.n_moving, 2))

    heading = rng.uniform(-np.pi, np.pi)
    rx_vel = config.receiver_speed * np.array([np.cos(heading), np.sin(heading)])

    return SimState(config=config, scat_pos0=positions, scat_vel=vel,
                    rx_pos0=rx.copy(), rx_vel=rx_vel, t=0)


def advance(state: SimState) -> SimState:
    """One block period: every position moves by velocity * block_period."""
    return replace(state, t=state.t + 1)


def path_geometry(scatterer: Scatterer, rx: ReceiverState,
                  tx_position) -> tuple[float, float]:
    """Reflected path length and its exact time derivative.

    l = |S - TX| + |RX - S|;  with constant velocities the derivative is
    dl/dt = v_S . (S-TX)/|S-TX| + (v_S - v_RX) . (S-RX)/|S-RX|.
    """
    tx = np.asarray(tx_position, dtype=float)
    s_tx = scatterer.position - tx
    s_rx = scatterer.position - rx.position
    d1 = np.hypot(*s_tx)
    d2 = np.hypot(*s_rx)
    if d1 <= 0.0 or d2 <= 0.0:
        raise ValidationError("scatterer coincides with transmitter or receiver")
    dl_dt = (scatterer.velocity @ s_tx) / d1 \
        + ((scatterer.velocity - rx.velocity) @ s_rx) / d2
    return float(d1 + d2), float(dl_dt)


def path_params(l: float, dl_dt: float, config: SimConfig) -> PathParams:
    """Delay, phase offset, Doppler and free-space amplitude of one path."""
    if l <= 0.0:
        raise ValidationError("path length must be strictly positive")
    sigma = l / config.c0
    theta = ((-l * config.f_carrier / config.c0) % 1.0) * 2.0 * np.pi
    f_d = -dl_dt * config.f_carrier / config.c0
    a = config.c0 / (4.0 * np.pi * config.f_carrier * l)
    return PathParams(l=l, dl_dt=dl_dt, sigma=sigma, theta=theta, f_d=f_d, a=a)


def snapshot(state: SimState) -> ChannelSnapshot:
    """All path parameters at the state's current time step (vectorised)."""
    cfg = state.config
    tx = np.asarray(cfg.tx_position, dtype=float)
    spos = state.scatterer_positions()
    rxs = state.receiver()

    s_tx = spos - tx
    s_rx = spos - rxs.position
    d1 = np.hypot(s_tx[:, 0], s_tx[:, 1])
    d2 = np.hypot(s_rx[:, 0], s_rx[:, 1])
    if (d1 <= 0.0).any() or (d2 <= 0.0).any():
        raise ValidationError("scatterer coincides with transmitter or receiver")
    l = d1 + d2
    rel = state.scat_vel - rxs.velocity
    dl_dt = (state.scat_vel * s_tx).sum(axis=1) / d1 + (rel * s_rx).sum(axis=1) / d2

    sigma = l / cfg.c0
    theta = ((-l * cfg.f_carrier / cfg.c0) % 1.0) * 2.0 * np.pi
    f_d = -dl_dt * cfg.f_carrier / cfg.c0
    a = cfg.c0 / (4.0 * np.pi * cfg.f_carrier * l)
    norm = 1.0 / np.sqrt((a * a).sum())
    return ChannelSnapshot(time_index=state.t, l=l, dl_dt=dl_dt, delay=sigma,
                           theta=theta, doppler=f_d, amplitude=a,
                           norm=float(norm), sample_rate=cfg.sample_rate,
                           sinc_halfwidth=cfg.sinc_halfwidth)


def shaping_kernel(offset, halfwidth: int = 8):
    """Windowed-sinc pulse shape sin(pi x/2)/(pi x/2) on [-halfwidth, halfwidth].

    Accepts scalars or arrays; value 1 at x = 0, 0 beyond the window.
    """
    x = np.asarray(offset, dtype=float)
    out = np.sinc(x / 2.0)
    out = np.where(np.abs(x) > halfwidth, 0.0, out)
    if np.isscalar(offset):
        return float(out)
    return out


def _path_taps(snapshot: ChannelSnapshot, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer tap positions and tap values of every path's shaping kernel.

    The kernel is sampled on the integer grid around each fractional sample
    delay, so each path is an exact FIR filter with 2*halfwidth taps.
    Returns (first tap index (n_paths,), tap values (n_paths, 2*halfwidth)).
    """
    hw = snapshot.sinc_halfwidth
    d = snapshot.delay * snapshot.sample_rate
    if ((d + hw) >= n / 2).any():
        raise ValidationError(
            f"path delay {d.max():.2f} samples exceeds the N/2 windowing bound")
    if (d - hw < -n / 2).any():
        raise ValidationError("negative path delay exceeds the block")
    j0 = np.ceil(d - hw).astype(np.int64)
    offs = j0[:, None] + np.arange(2 * hw)[None, :]
    taps = shaping_kernel(offs - d[:, None], hw)
    return j0, taps


def apply_channel(snap: ChannelSnapshot, s: Signal, rng: np.random.Generator,
                  *, noiseless: bool = False, snr_db: float | None = 12.0,
                  include_doppler: bool = True) -> Signal:
    """Transmit one block through the frozen channel and add receiver noise.

    The received block is
        R[n] = norm * sum_i a_i exp(i theta_i + i 2 pi f_Di n / fs)
                      * (k_i (*) s)[n]
    with k_i the shaping kernel centred at the fractional sample delay
    sigma_i * fs and (*) circular convolution over the block.  With
    include_doppler=False the channel is evaluated frozen at the block
    start (the per-block time-invariant approximation used for estimator
    validation).

    Noise: i.i.d. Gaussian per real component with variance
    10^(-snr_db/10) * (mean received power), i.e. the stated SNR is the
    ratio of received signal power to per-component noise power.
    """
    x = np.asarray(s.samples)
    n = x.shape[0]
    j0, taps = _path_taps(snap, n)
    n_taps = taps.shape[1]

    # gathered[i, m] = s[(m - j0_i) mod n] for m in [-(n_taps-1), n);
    # indexing a tripled copy keeps offsets in range without a full modulo
    x3 = np.concatenate([x, x, x])
    cols = np.arange(-(n_taps - 1) + n, 2 * n)
    gathered = x3[cols[None, :] + ((-j0) % n)[:, None]]
    # circular convolution with each path's taps via a sliding view:
    # y[i, m] = sum_k taps[i, k] * gathered[i, (n_taps-1) - k + m]
    tail = gathered[:, n_taps - 1:]
    windows = np.lib.stride_tricks.as_strided(
        tail, shape=(gathered.shape[0], n_taps, n),
        strides=(gathered.strides[0], -gathered.strides[1], gathered.strides[1]))
    y = np.einsum("ik,ikm->im", taps, windows)

    if include_doppler:
        tau = np.arange(n) / snap.sample_rate
        phase = np.exp(1j * (snap.theta[:, None]
                             + 2.0 * np.pi * snap.doppler[:, None] * tau[None, :]))
        r = snap.norm * np.einsum("i,in,in->n", snap.amplitude, phase, y)
    else:
        coeff = snap.norm * snap.amplitude * np.exp(1j * snap.theta)
        r = coeff @ y

    if not noiseless and snr_db is not None and np.isfinite(snr_db):
        p_rx = float(np.mean(np.abs(r) ** 2))
        sigma_c = np.sqrt(p_rx * 10.0 ** (-snr_db / 10.0))
        noise = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        r = r + sigma_c * noise
    return Signal(samples=r, sample_rate=snap.sample_rate)


def true_transfer_function(snap: ChannelSnapshot, n: int) -> np.ndarray:
    """Exact DFT of the realised channel impulse response (ground truth).

    Evaluates, per path, the DFT of the integer-sampled shaping kernel
    placed at that path's fractional delay; matches apply_channel exactly
    in the noiseless zero-Doppler case.
    """
    j0, taps = _path_taps(snap, n)
    f = np.arange(n)
    tap_spec = taps @ np.exp(-2j * np.pi * np.outer(np.arange(taps.shape[1]), f) / n)
    ramp = np.exp(-2j * np.pi * np.outer(j0, f) / n)
    coeff = snap.norm * snap.amplitude * np.exp(1j * snap.theta)
    return (coeff[:, None] * ramp * tap_spec).sum(axis=0)
