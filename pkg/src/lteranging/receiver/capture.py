"""Frame-by-frame receiver: acquisition, CRS tracking and CIR emission."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .. import phy
from ..channel import SPEED_OF_LIGHT
from ..iqfile import IqCapture
from .acquisition import AcquisitionError, AcquisitionResult, acquire
from .estimation import CfrEstimate, cfr_from_spectrum, coarse_doppler, earliest_path, esprit, extract_cir
from .tracking import EQ1_MODES, TrackingState, pll_step

TRACKING_HEADER = ["frame", "toa_samples", "doppler_hz", "lock"]
ALIGN_MODES = ("toa", "peak")


class BlockStream:
    """Forward-only sliceable view over an iterator of equal-length blocks.

    Lets the receiver consume a simulated stream without materialising the
    whole capture; blocks that fall behind the read position are dropped.
    """

    def __init__(self, blocks: Iterable[tuple[int, np.ndarray]], block_length: int,
                 n_blocks: int):
        self._it = iter(blocks)
        self.block_length = block_length
        self.n_blocks = n_blocks
        self._cache: dict[int, np.ndarray] = {}
        self._next = 0

    def __len__(self) -> int:
        return self.block_length * self.n_blocks

    def __getitem__(self, key: slice) -> np.ndarray:
        start, stop, _ = key.indices(len(self))
        if stop <= start:
            return np.zeros(0, dtype=complex)
        first, last = start // self.block_length, (stop - 1) // self.block_length
        if first < min(self._cache, default=self._next):
            raise IndexError("BlockStream cannot seek backwards past dropped blocks")
        while self._next <= last:
            _, block = next(self._it)
            self._cache[self._next] = block
            self._next += 1
        for old in [b for b in self._cache if b < first]:
            del self._cache[old]
        data = np.concatenate([self._cache[b] for b in range(first, last + 1)])
        off = first * self.block_length
        return data[start - off:stop - off]


@dataclass
class CirSample:
    magnitudes: np.ndarray
    frame_index: int
    toa_estimate_samples: float
    true_range_m: float = math.nan


@dataclass
class ReceiverConfig:
    loop_bandwidth_hz: float = 5.0
    eq1_mode: str = "dimensional"
    align: str = "toa"
    n_cir: int = 100
    backoff: int | None = None  # samples; default CP/4
    min_peak_ratio: float = 2.0
    model_order: int | None = None
    acquisition_frames: float = 2.0

    def __post_init__(self):
        if self.eq1_mode not in EQ1_MODES:
            raise ValueError(f"eq1_mode must be one of {EQ1_MODES}")
        if self.align not in ALIGN_MODES:
            raise ValueError(f"align must be one of {ALIGN_MODES}")


@dataclass
class ReceiverOutput:
    acquisition: AcquisitionResult
    sampling_rate_hz: float
    frames: list[int] = field(default_factory=list)
    toa_samples: list[float] = field(default_factory=list)
    doppler_hz: list[float] = field(default_factory=list)
    lock: list[bool] = field(default_factory=list)
    esprit_toa_samples: list[float] = field(default_factory=list)
    cir: list[np.ndarray] = field(default_factory=list)

    def samples(self) -> list[CirSample]:
        return [CirSample(m, k, t) for m, k, t in zip(self.cir, self.frames, self.toa_samples)]

    @property
    def toa_s(self) -> np.ndarray:
        return np.asarray(self.toa_samples) / self.sampling_rate_hz

    def write_tracking_log(self, path) -> None:
        write_tracking_log(path, self.frames, self.toa_samples, self.doppler_hz, self.lock,
                           self.sampling_rate_hz)

    def write_cir_dataset(self, path, truth_range: dict[int, float] | None = None) -> None:
        labels = [truth_range.get(k, math.nan) if truth_range else math.nan for k in self.frames]
        write_cir_dataset(path, self.frames, labels, np.asarray(self.cir))


class Receiver:
    """Two-stage software receiver for one eNodeB."""

    def __init__(self, grid: phy.GridConfig, carrier_frequency_hz: float,
                 config: ReceiverConfig | None = None, start_time_s: float = 0.0):
        self.grid = grid
        self.carrier_frequency_hz = carrier_frequency_hz
        self.config = config or ReceiverConfig()
        self.start_offset = int(round(start_time_s * grid.sampling_rate_hz))
        self.backoff = (self.config.backoff if self.config.backoff is not None
                        else grid.cp_lengths[1] // 4)
        # port-0 CRS symbols with l = 0 share one comb
        self.comb_symbols = np.arange(phy.SLOTS_PER_FRAME) * phy.SYMBOLS_PER_SLOT
        n = grid.fft_size
        self.symbol_times = (grid.body_starts[self.comb_symbols] + n / 2) / grid.sampling_rate_hz
        self._refs: phy.ReferenceSignals | None = None

    @property
    def ts(self) -> float:
        return self.grid.sample_period_s

    def acquire(self, capture) -> AcquisitionResult:
        acq = acquire(capture, self.grid, self.config.min_peak_ratio,
                      self.config.acquisition_frames)
        grid = phy.make_grid_config(self.grid.bandwidth_mhz, acq.cell_id)
        self.grid = grid
        self._refs = phy.generate_reference_signals(grid)
        return acq

    def _frame_cfrs(self, block: np.ndarray) -> list[CfrEstimate]:
        spectra = phy.demodulate_symbols(block, 0, self.grid, self.comb_symbols)
        return [cfr_from_spectrum(row, self._refs, int(s))
                for row, s in zip(spectra, self.comb_symbols)]

    def _combine(self, cfrs: list[CfrEstimate], doppler_hz: float) -> CfrEstimate:
        rot = np.exp(-2j * np.pi * doppler_hz * self.symbol_times)
        values = np.mean([c.values * r for c, r in zip(cfrs, rot)], axis=0)
        return cfrs[0].with_values(values)

    def run(self, capture, n_frames: int | None = None,
            acquisition: AcquisitionResult | None = None) -> ReceiverOutput:
        cfg = self.config
        acq = acquisition or self.acquire(capture)
        if self._refs is None:
            self.grid = phy.make_grid_config(self.grid.bandwidth_mhz, acq.cell_id)
            self._refs = phy.generate_reference_signals(self.grid)
        L = self.grid.frame_length
        fs = self.grid.sampling_rate_hz
        out = ReceiverOutput(acq, fs)

        # absolute arrival (samples after nominal transmission) of the first frame
        arrival = acq.coarse_frame_start + self.start_offset
        k, first_toa = divmod(arrival, L)
        toa = float(first_toa)
        state: TrackingState | None = None
        count = 0
        while n_frames is None or count < n_frames:
            w = int(round(toa)) + k * L - self.start_offset - self.backoff
            if w + L > len(capture):
                break
            if w < -self.backoff:
                k += 1
                continue
            if w < 0:
                # window reaches back before the first captured sample
                block = np.r_[np.zeros(-w, dtype=complex), capture[0:w + L]]
            else:
                block = capture[w:w + L]
            cfrs = self._frame_cfrs(block)
            rel = toa + k * L - self.start_offset - w  # TOA inside the window, samples

            if state is None:
                dt = self.symbol_times[1] - self.symbol_times[0]
                f0 = coarse_doppler(cfrs[0], cfrs[1], dt)
                frame_cfr = self._combine(cfrs, f0)
                delays, amps = esprit(frame_cfr, cfg.model_order)
                first = earliest_path(delays, amps)
                toa = (w + first / self.ts) - k * L + self.start_offset
                rel = toa + k * L - self.start_offset - w
                comp = frame_cfr.shifted(rel * self.ts)
                state = TrackingState.start(toa, float(np.angle(np.sum(comp.values))), f0, k)
            else:
                frame_cfr = self._combine(cfrs, state.doppler_hz)
                comp = frame_cfr.shifted(rel * self.ts)

            try:
                delays, amps = esprit(frame_cfr, cfg.model_order)
                esp = w + earliest_path(delays, amps) / self.ts - k * L + self.start_offset
            except Exception:
                esp = math.nan

            if cfg.align == "toa":
                mags = extract_cir(comp, cfg.n_cir, 0.0)
            else:
                mags = extract_cir(frame_cfr, cfg.n_cir, None)
            out.frames.append(k)
            out.toa_samples.append(toa)
            out.doppler_hz.append(state.doppler_hz)
            out.lock.append(state.locked)
            out.esprit_toa_samples.append(esp)
            out.cir.append(mags)

            state = pll_step(state, comp, cfg.loop_bandwidth_hz, sample_period_s=self.ts,
                             eq1_mode=cfg.eq1_mode,
                             carrier_frequency_hz=self.carrier_frequency_hz)
            toa = state.toa_samples
            k += 1
            count += 1
        return out


def process_capture(iq_path, bandwidth_mhz: float, config: ReceiverConfig | None = None,
                    n_frames: int | None = None) -> ReceiverOutput:
    """Acquire and track a capture file written in the shared IQ format."""
    cap = IqCapture(iq_path)
    grid = phy.make_grid_config(bandwidth_mhz, cap.meta.cell_id)
    if abs(grid.sampling_rate_hz - cap.meta.sampling_rate_hz) > 1e-6:
        raise ValueError(
            f"{iq_path}: sampling rate {cap.meta.sampling_rate_hz} does not match "
            f"{bandwidth_mhz} MHz grid ({grid.sampling_rate_hz})")
    rx = Receiver(grid, cap.meta.carrier_frequency_hz, config, cap.meta.start_time)
    try:
        return rx.run(cap, n_frames)
    except AcquisitionError as exc:
        raise AcquisitionError(f"{iq_path}: {exc}") from exc


def remove_clock_bias(rover_frames, rover_toa_s, base_frames, base_toa_s,
                      base_known_range_m: float) -> np.ndarray:
    """Rover range (m) per rover frame with the eNodeB clock bias removed.

    The base sits at a known range, so its TOA minus the geometric delay is
    the clock bias; subtracting it frame by frame leaves rover range.
    """
    base = dict(zip((int(f) for f in base_frames), np.asarray(base_toa_s, dtype=float)))
    out = np.empty(len(rover_frames))
    for i, (k, toa) in enumerate(zip(rover_frames, rover_toa_s)):
        k = int(k)
        if k not in base:
            raise KeyError(f"base log has no frame {k}")
        bias = base[k] - base_known_range_m / SPEED_OF_LIGHT
        out[i] = (toa - bias) * SPEED_OF_LIGHT
    return out


# ---------------------------------------------------------------------------
# Files


def write_tracking_log(path, frames, toa_samples, doppler_hz, lock, sampling_rate_hz=None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if sampling_rate_hz is not None:
            fh.write(f"# sampling_rate_hz={sampling_rate_hz!r}\n")
        w.writerow(TRACKING_HEADER)
        for k, t, d, l in zip(frames, toa_samples, doppler_hz, lock):
            w.writerow([int(k), repr(float(t)), repr(float(d)), int(bool(l))])
    tmp.replace(path)


def read_tracking_log(path) -> dict:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise OSError(f"cannot read tracking log {path}: {exc}") from exc
    fs = None
    if lines and lines[0].startswith("#"):
        fs = float(lines[0].split("=", 1)[1])
        lines = lines[1:]
    rows = list(csv.reader(lines))
    if not rows or rows[0] != TRACKING_HEADER:
        raise ValueError(f"unexpected tracking log header in {path}")
    data = np.array(rows[1:], dtype=float).reshape(-1, 4)
    return {"frame": data[:, 0].astype(int), "toa_samples": data[:, 1],
            "doppler_hz": data[:, 2], "lock": data[:, 3].astype(bool),
            "sampling_rate_hz": fs}


def write_cir_dataset(path, frames, labels, magnitudes: np.ndarray) -> None:
    path = Path(path)
    n_cir = magnitudes.shape[1] if magnitudes.ndim == 2 else 0
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "true_range_m"] + [f"mag_{i}" for i in range(n_cir)])
        for k, r, row in zip(frames, labels, magnitudes):
            w.writerow([int(k), repr(float(r))] + [repr(float(v)) for v in row])
    tmp.replace(path)


def read_cir_dataset(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(frames, true_range_m, magnitudes)``."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [r for r in reader]
    except (OSError, StopIteration) as exc:
        raise OSError(f"cannot read CIR dataset {path}: {exc}") from exc
    if header[:2] != ["frame", "true_range_m"]:
        raise ValueError(f"unexpected CIR dataset header in {path}")
    arr = np.array(rows, dtype=float).reshape(-1, len(header))
    return arr[:, 0].astype(int), arr[:, 1], arr[:, 2:]
