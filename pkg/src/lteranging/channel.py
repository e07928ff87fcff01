"""Indoor multipath channel simulation along a receiver trajectory.

The rover sees a Rician channel: a deterministic line-of-sight tap plus
single-bounce taps from fixed scatterers around the area. Excess delays and
mean powers therefore follow the rover's position, and each scattered tap
also carries first-order Gauss-Markov small-scale fading across frames.
The eNodeB clock bias is a random walk (knots every ``clock_knot_s``)
smoothed with a cubic spline, shared by all receivers.

Every random quantity is drawn up front from the scenario seed, so a frame
realization is a pure function of ``(seed, frame_index)``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import signal
from scipy.interpolate import CubicSpline

from . import phy
from .iqfile import IqMetadata, IqWriter, atomic_write_text

SPEED_OF_LIGHT = 299_792_458.0
FD_HALF_TAPS = 32  # 64-tap fractional delay filter
FD_KAISER_BETA = 8.0

TRUTH_HEADER = ["frame", "time_s", "true_range_m", "clock_bias_s", "doppler_hz"]


class ScenarioError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Geometry


@dataclass
class Trajectory:
    """Piecewise-linear path through timed waypoints."""

    times: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if self.positions.shape[1] == 2:
            self.positions = np.column_stack([self.positions, np.zeros(len(self.positions))])
        if len(self.times) < 2 or len(self.times) != len(self.positions):
            raise ScenarioError("trajectory needs at least two timed waypoints")
        if np.any(np.diff(self.times) <= 0):
            raise ScenarioError("trajectory times must be strictly increasing")
        if self.path_length <= 0:
            raise ScenarioError("trajectory has zero length")

    @classmethod
    def from_waypoints(cls, waypoints) -> "Trajectory":
        arr = np.asarray(waypoints, dtype=float)
        return cls(arr[:, 0], arr[:, 1:])

    def to_waypoints(self) -> list[list[float]]:
        return np.column_stack([self.times, self.positions]).tolist()

    @classmethod
    def rectangle(cls, perimeter_m=109.0, aspect=1.6, duration_s=50.0,
                  origin=(0.0, 0.0), height_m=1.0, corner_radius_m=3.0,
                  points_per_corner=8) -> "Trajectory":
        """Closed rectangle with rounded corners, walked at constant speed.

        ``perimeter_m`` is the length of the rounded path.
        """
        r = corner_radius_m
        # rounded perimeter = 2(w + h) - (8 - 2*pi) r
        sides = perimeter_m + (8 - 2 * np.pi) * r
        h = sides / (2 * (1 + aspect))
        w = aspect * h
        if r < 0 or 2 * r > min(w, h):
            raise ScenarioError("corner radius too large for the rectangle")
        x0, y0 = origin
        centers = [(x0 + w - r, y0 + r), (x0 + w - r, y0 + h - r),
                   (x0 + r, y0 + h - r), (x0 + r, y0 + r)]
        pts = [(x0 + r, y0)]
        for i, (cx, cy) in enumerate(centers):
            a = np.linspace(-np.pi / 2 + i * np.pi / 2, i * np.pi / 2, points_per_corner + 1)
            pts.extend(zip(cx + r * np.cos(a), cy + r * np.sin(a)))
        pts.append((x0 + r, y0))
        xy = np.array(pts)
        keep = np.r_[True, np.linalg.norm(np.diff(xy, axis=0), axis=1) > 1e-12]
        xy = xy[keep]
        seg = np.r_[0.0, np.cumsum(np.linalg.norm(np.diff(xy, axis=0), axis=1))]
        times = seg / seg[-1] * duration_s
        pos = np.column_stack([xy, np.full(len(xy), height_m)])
        return cls(times, pos)

    @property
    def path_length(self) -> float:
        return float(np.linalg.norm(np.diff(self.positions, axis=0), axis=1).sum())

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    @property
    def max_speed(self) -> float:
        seg = np.linalg.norm(np.diff(self.positions, axis=0), axis=1)
        return float(np.max(seg / np.diff(self.times)))

    def position(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.column_stack([np.interp(t, self.times, self.positions[:, i])
                                for i in range(3)])

    def velocity(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        seg = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2)
        v = np.diff(self.positions, axis=0) / np.diff(self.times)[:, None]
        return v[seg]


# ---------------------------------------------------------------------------
# Scenario configuration


def _default_waypoints() -> list[list[float]]:
    return Trajectory.rectangle().to_waypoints()


@dataclass
class ScenarioConfig:
    bandwidth_mhz: float = 10.0
    cell_id: int = 383
    carrier_frequency_hz: float = 2.145e9
    n_frames: int = 5000
    enodeb_position: list = field(default_factory=lambda: [-230.0, -225.0, 30.0])
    base_position: list = field(default_factory=lambda: [17.0, 10.0, 20.0])
    waypoints: list = field(default_factory=_default_waypoints)
    n_taps: int = 8
    delay_spread_s: float = 300e-9
    k_factor_db: float | None = 3.0  # None: pure line of sight
    tap_correlation: float = 0.95
    scatterer_radius_m: float = 40.0
    path_loss_exponent: float = 2.0
    reference_distance_m: float = 300.0
    snr_db: float = 20.0
    base_snr_db: float = 30.0
    clock_bias_intensity: float = 10e-9  # s / sqrt(s)
    clock_knot_s: float = 10.0
    payload_seed: int = 1
    seed: int = 0

    def __post_init__(self):
        phy.make_grid_config(self.bandwidth_mhz, self.cell_id)
        if self.n_frames < 1:
            raise ScenarioError("n_frames must be positive")
        if self.n_taps < 1:
            raise ScenarioError("n_taps must be at least 1")
        if not 0 <= self.tap_correlation <= 1:
            raise ScenarioError("tap_correlation must lie in [0, 1]")
        if self.clock_bias_intensity < 0:
            raise ScenarioError("clock_bias_intensity must be non-negative")
        traj = self.trajectory
        if traj.times[0] > 0 or traj.times[-1] < (self.n_frames - 1) * phy.FRAME_DURATION_S:
            raise ScenarioError(
                f"trajectory [{traj.times[0]}, {traj.times[-1]}] s does not cover "
                f"{self.n_frames} frames"
            )

    @property
    def trajectory(self) -> Trajectory:
        return Trajectory.from_waypoints(self.waypoints)

    @property
    def grid(self) -> phy.GridConfig:
        return phy.make_grid_config(self.bandwidth_mhz, self.cell_id)

    @property
    def duration_s(self) -> float:
        return self.n_frames * phy.FRAME_DURATION_S

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, path) -> "ScenarioConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Realizations


@dataclass
class ChannelRealization:
    frame_index: int
    delays_s: np.ndarray
    gains: np.ndarray
    doppler_hz: float
    snr_db: float | None
    clock_bias_s: float
    true_range_m: float

    def __post_init__(self):
        order = np.argsort(self.delays_s, kind="stable")
        self.delays_s = np.asarray(self.delays_s, dtype=float)[order]
        self.gains = np.asarray(self.gains, dtype=complex)[order]


def _path_gain(distance, ref, exponent):
    return (ref / np.asarray(distance)) ** (exponent / 2)


class Scenario:
    """Precomputed random processes and geometry for one scenario."""

    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.grid = config.grid
        cfg = config
        n = cfg.n_frames
        self.frame_times = np.arange(n) * phy.FRAME_DURATION_S
        traj = cfg.trajectory
        self.trajectory = traj
        self.enb = np.asarray(cfg.enodeb_position, dtype=float)
        self.base = np.asarray(cfg.base_position, dtype=float)
        self.rover_pos = traj.position(self.frame_times)
        rover_vel = traj.velocity(self.frame_times)
        los_vec = self.rover_pos - self.enb
        self.rover_range = np.linalg.norm(los_vec, axis=1)
        self.rover_range_rate = np.einsum("ij,ij->i", los_vec, rover_vel) / self.rover_range
        self.base_range = float(np.linalg.norm(self.base - self.enb))

        seeds = np.random.SeedSequence(cfg.seed).spawn(3)
        self._clock(np.random.default_rng(seeds[0]))
        self._scatterers(np.random.default_rng(seeds[1]))
        self._noise_key = int(seeds[2].generate_state(1)[0])

    def _clock(self, rng):
        cfg = self.config
        horizon = self.frame_times[-1] + 2 * cfg.clock_knot_s
        knots = np.arange(0.0, horizon + cfg.clock_knot_s, cfg.clock_knot_s)
        steps = rng.normal(0.0, cfg.clock_bias_intensity * math.sqrt(cfg.clock_knot_s),
                           size=len(knots) - 1)
        values = np.r_[0.0, np.cumsum(steps)]
        spline = CubicSpline(knots, values)
        self.clock_bias = spline(self.frame_times)
        self.clock_rate = spline(self.frame_times, 1)
        if cfg.clock_bias_intensity == 0:
            self.clock_bias = np.zeros_like(self.frame_times)
            self.clock_rate = np.zeros_like(self.frame_times)

    def _scatterers(self, rng):
        cfg = self.config
        n_nlos = cfg.n_taps - 1
        center = self.trajectory.positions.mean(axis=0)
        radius = cfg.scatterer_radius_m * np.sqrt(rng.uniform(size=n_nlos))
        angle = rng.uniform(0, 2 * np.pi, size=n_nlos)
        self.scatterers = center + np.column_stack(
            [radius * np.cos(angle), radius * np.sin(angle), np.zeros(n_nlos)])
        # Gauss-Markov small-scale fading, one unit-power process per tap
        rho = cfg.tap_correlation
        w = (rng.normal(size=(cfg.n_frames, n_nlos))
             + 1j * rng.normal(size=(cfg.n_frames, n_nlos))) / np.sqrt(2)
        z = np.empty_like(w)
        if cfg.n_frames:
            z[0] = w[0]
        innov = math.sqrt(max(0.0, 1 - rho * rho))
        for k in range(1, cfg.n_frames):
            z[k] = rho * z[k - 1] + innov * w[k]
        self.fading = z
        self.nlos_phase0 = rng.uniform(0, 2 * np.pi, size=n_nlos)

        # bounce path lengths per frame, mean power normalized over the run
        d_in = np.linalg.norm(self.scatterers - self.enb, axis=1)
        d_out = np.linalg.norm(self.rover_pos[:, None, :] - self.scatterers[None], axis=2)
        self.nlos_length = d_in[None, :] + d_out
        excess = (self.nlos_length - self.rover_range[:, None]) / SPEED_OF_LIGHT
        profile = np.exp(-excess / cfg.delay_spread_s)
        if cfg.k_factor_db is None or n_nlos == 0:
            self.nlos_power = np.zeros_like(profile)
        else:
            k_lin = 10 ** (cfg.k_factor_db / 10)
            self.nlos_power = profile / profile.sum(axis=1).mean() / k_lin

    def noise_rng(self, stream: int, frame_index: int) -> np.random.Generator:
        return np.random.default_rng([self._noise_key, stream, frame_index])

    def check_frame(self, frame_index: int) -> None:
        if not 0 <= frame_index < self.config.n_frames:
            raise ScenarioError(
                f"frame {frame_index} outside scenario of {self.config.n_frames} frames")

    def rover_realization(self, k: int) -> ChannelRealization:
        self.check_frame(k)
        cfg = self.config
        fc = cfg.carrier_frequency_hz
        bias = self.clock_bias[k]
        r = self.rover_range[k]
        pl = lambda d: _path_gain(d, cfg.reference_distance_m, cfg.path_loss_exponent)
        los_delay = r / SPEED_OF_LIGHT + bias
        delays = [los_delay]
        gains = [pl(r) * np.exp(-2j * np.pi * fc * los_delay)]
        if self.nlos_power.shape[1]:
            length = self.nlos_length[k]
            d = length / SPEED_OF_LIGHT + bias
            g = (np.sqrt(self.nlos_power[k]) * pl(length) * self.fading[k]
                 * np.exp(1j * self.nlos_phase0 - 2j * np.pi * fc * d))
            keep = self.nlos_power[k] > 0
            delays.extend(d[keep])
            gains.extend(g[keep])
        doppler = -fc * (self.rover_range_rate[k] / SPEED_OF_LIGHT + self.clock_rate[k])
        return ChannelRealization(k, np.array(delays), np.array(gains), float(doppler),
                                  cfg.snr_db, float(bias), float(r))

    def base_realization(self, k: int) -> ChannelRealization:
        self.check_frame(k)
        cfg = self.config
        fc = cfg.carrier_frequency_hz
        bias = self.clock_bias[k]
        delay = self.base_range / SPEED_OF_LIGHT + bias
        gain = np.exp(-2j * np.pi * fc * delay)
        doppler = -fc * self.clock_rate[k]
        return ChannelRealization(k, np.array([delay]), np.array([gain]), float(doppler),
                                  cfg.base_snr_db, float(bias), self.base_range)

    def realization(self, k: int, receiver: str = "rover") -> ChannelRealization:
        if receiver == "rover":
            return self.rover_realization(k)
        if receiver == "base":
            return self.base_realization(k)
        raise ScenarioError(f"unknown receiver {receiver!r}")


def realize_channel(scenario, frame_index: int, receiver: str = "rover") -> ChannelRealization:
    """Channel seen by ``receiver`` for the frame transmitted at ``frame_index``."""
    if isinstance(scenario, ScenarioConfig):
        scenario = Scenario(scenario)
    return scenario.realization(frame_index, receiver)


# ---------------------------------------------------------------------------
# Signal path


def fractional_delay_taps(delay_samples: float) -> tuple[int, np.ndarray]:
    """Kaiser-windowed sinc for a (possibly fractional) delay.

    Returns ``(first_index, taps)`` such that the filter is
    ``taps[i]`` at lag ``first_index + i``.
    """
    base = math.floor(delay_samples)
    lags = np.arange(base - FD_HALF_TAPS + 1, base + FD_HALF_TAPS + 1)
    x = lags - delay_samples
    window = np.i0(FD_KAISER_BETA * np.sqrt(np.clip(1 - (x / FD_HALF_TAPS) ** 2, 0, None)))
    window /= np.i0(FD_KAISER_BETA)
    return int(lags[0]), np.sinc(x) * window


def multipath_impulse_response(delays_samples, gains) -> tuple[int, np.ndarray]:
    """Combined FIR of all taps: ``(first_lag, coefficients)``."""
    parts = [fractional_delay_taps(d) for d in delays_samples]
    lo = min(p[0] for p in parts)
    hi = max(p[0] + len(p[1]) for p in parts)
    h = np.zeros(hi - lo, dtype=complex)
    for (first, taps), g in zip(parts, gains):
        h[first - lo:first - lo + len(taps)] += g * taps
    return lo, h


def multipath_filter(samples: np.ndarray, delays_samples, gains) -> np.ndarray:
    """``y[n] = sum_l g_l x(n - d_l)`` with x taken as zero outside the input."""
    x = np.asarray(samples, dtype=complex)
    lo, h = multipath_impulse_response(delays_samples, gains)
    full = signal.oaconvolve(x, h)
    # full[i] corresponds to output index i + lo
    out = np.zeros(len(x), dtype=complex)
    start = max(0, lo)
    src = start - lo
    stop = min(len(x), len(full) + lo)
    if stop > start:
        out[start:stop] = full[src:src + stop - start]
    return out


def add_noise(samples: np.ndarray, snr_db: float | None, rng: np.random.Generator) -> np.ndarray:
    """Complex white Gaussian noise at ``snr_db`` relative to the signal power."""
    if snr_db is None:
        return samples
    power = np.mean(np.abs(samples) ** 2)
    sigma = math.sqrt(power / 10 ** (snr_db / 10) / 2)
    noise = rng.normal(0, sigma, size=(2, len(samples)))
    return samples + noise[0] + 1j * noise[1]


def apply_channel(frame_samples: np.ndarray, realization: ChannelRealization,
                  sampling_rate_hz: float, rng: np.random.Generator | None = None,
                  time_offset_s: float = 0.0) -> np.ndarray:
    """Propagate samples through a realization.

    Taps are applied as fractional delays, then the whole block is rotated by
    the carrier Doppler and noise is added when ``realization.snr_db`` is set.
    """
    x = np.asarray(frame_samples, dtype=complex)
    y = multipath_filter(x, realization.delays_s * sampling_rate_hz, realization.gains)
    if realization.doppler_hz:
        t = time_offset_s + np.arange(len(y)) / sampling_rate_hz
        y = y * np.exp(2j * np.pi * realization.doppler_hz * t)
    if realization.snr_db is not None:
        y = add_noise(y, realization.snr_db, rng if rng is not None else np.random.default_rng())
    return y


def resample(samples: np.ndarray, from_rate: float, to_rate: float,
             max_denominator: int = 1000) -> np.ndarray:
    """Polyphase rational resampling between two sample rates."""
    if from_rate <= 0 or to_rate <= 0:
        raise ValueError("sample rates must be positive")
    ratio = Fraction(to_rate / from_rate).limit_denominator(max_denominator)
    if abs(float(ratio) - to_rate / from_rate) > 1e-9 * to_rate / from_rate:
        raise ValueError(
            f"rate ratio {to_rate}/{from_rate} is not rational with denominator "
            f"<= {max_denominator}")
    x = np.asarray(samples)
    if ratio == 1:
        return x.copy()
    return signal.resample_poly(x, ratio.numerator, ratio.denominator)


# ---------------------------------------------------------------------------
# Frame stream and dataset generation


class Transmitter:
    """Cached per-frame transmit waveforms for one cell."""

    def __init__(self, grid: phy.GridConfig, payload_seed: int | None):
        self.grid = grid
        self.refs = phy.generate_reference_signals(grid)
        self.payload_seed = payload_seed
        self._cache: dict[int, np.ndarray] = {}

    def frame(self, k: int) -> np.ndarray:
        if k < 0:
            return np.zeros(self.grid.frame_length, dtype=complex)
        if k not in self._cache:
            grid = phy.build_frame_grid(self.grid, self.refs, k, self.payload_seed)
            self._cache[k] = phy.ofdm_modulate(grid, self.grid)
            for old in [j for j in self._cache if j < k - 1]:
                del self._cache[old]
        return self._cache[k]


RECEIVER_STREAMS = {"rover": 0, "base": 1}


def simulate_stream(scenario: Scenario, receiver: str = "rover",
                    frames: range | None = None) -> Iterator[tuple[int, np.ndarray]]:
    """Yield ``(k, block)`` where block is the received signal on the
    receiver's clock during [k*T_f, (k+1)*T_f).

    Capture sample 0 corresponds to the nominal transmission time of frame 0.
    """
    grid = scenario.grid
    L = grid.frame_length
    fs = grid.sampling_rate_hz
    tx = Transmitter(grid, scenario.config.payload_seed)
    stream = RECEIVER_STREAMS[receiver]
    frames = range(scenario.config.n_frames) if frames is None else frames
    for k in frames:
        real = scenario.realization(k, receiver)
        lo, h = multipath_impulse_response(real.delays_s * fs, real.gains)
        hi = lo + len(h) - 1
        # lags span [lo, hi]: need hi samples of history and -lo of lookahead
        pre = max(hi, 0)
        post = max(-lo, 0)
        window = np.concatenate([tx.frame(k - 1)[L - pre:], tx.frame(k), tx.frame(k + 1)[:post]])
        full = signal.oaconvolve(window, h)
        # full[i] is the output at window index i + lo
        y = full[pre - lo:pre - lo + L]
        if real.doppler_hz:
            y = y * np.exp(2j * np.pi * real.doppler_hz * np.arange(L) / fs)
        y = add_noise(y, real.snr_db, scenario.noise_rng(stream, k))
        yield k, y


def truth_rows(scenario: Scenario, receiver: str = "rover") -> list[tuple]:
    rows = []
    for k in range(scenario.config.n_frames):
        real = scenario.realization(k, receiver)
        rows.append((k, k * phy.FRAME_DURATION_S, real.true_range_m,
                     real.clock_bias_s, real.doppler_hz))
    return rows


def write_truth(path, rows) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRUTH_HEADER)
        for k, t, r, b, d in rows:
            w.writerow([k, f"{t:.6f}", f"{r:.9f}", f"{b:.15e}", f"{d:.9f}"])
    tmp.replace(path)


def read_truth(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [list(map(float, r)) for r in reader]
    except (OSError, StopIteration) as exc:
        raise OSError(f"cannot read truth table {path}: {exc}") from exc
    if header != TRUTH_HEADER:
        raise ValueError(f"unexpected truth header in {path}: {header}")
    arr = np.asarray(rows, dtype=float).reshape(-1, len(TRUTH_HEADER))
    out = {name: arr[:, i] for i, name in enumerate(TRUTH_HEADER)}
    out["frame"] = out["frame"].astype(int)
    return out


def generate_dataset(scenario, out_dir, receivers=("rover", "base")) -> dict[str, Path]:
    """Write ``<rx>.iq`` (+ sidecar) and ``truth_<rx>.csv`` for each receiver."""
    if isinstance(scenario, ScenarioConfig):
        scenario = Scenario(scenario)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = scenario.grid
    paths = {}
    for rx in receivers:
        iq_path = out_dir / f"{rx}.iq"
        meta = IqMetadata(sampling_rate_hz=grid.sampling_rate_hz,
                          carrier_frequency_hz=scenario.config.carrier_frequency_hz,
                          start_time=0.0, cell_id=grid.cell_id)
        tmp = iq_path.with_name(iq_path.name + ".tmp")
        with IqWriter(tmp, meta) as w:
            for _, block in simulate_stream(scenario, rx):
                w.write(block)
        tmp.replace(iq_path)
        tmp.with_suffix(".json").replace(iq_path.with_suffix(".json"))
        write_truth(out_dir / f"truth_{rx}.csv", truth_rows(scenario, rx))
        paths[rx] = iq_path
    atomic_write_text(out_dir / "scenario.json",
                      json.dumps(scenario.config.to_dict(), indent=2, sort_keys=True) + "\n")
    return paths
