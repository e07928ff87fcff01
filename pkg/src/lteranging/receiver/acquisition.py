"""Cell search: PSS timing/root detection followed by SSS group detection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .. import phy


class AcquisitionError(RuntimeError):
    pass


@dataclass
class AcquisitionResult:
    cell_id: int
    coarse_frame_start: int
    correlation_peak_ratio: float


def pss_replica(config: phy.GridConfig, n_id_2: int) -> np.ndarray:
    """Time-domain PSS symbol body (no CP) with the modulator's scaling."""
    bins = np.zeros(config.fft_size, dtype=complex)
    bins[config.fft_bins[phy.sync_subcarriers(config)]] = phy.pss_sequence(n_id_2)
    return np.fft.ifft(bins)


def _folded_pss_metric(x: np.ndarray, config: phy.GridConfig) -> np.ndarray:
    """|PSS correlation|^2 folded modulo the half-frame, one row per root."""
    half = config.half_frame_length
    out = np.zeros((3, half))
    for n_id_2 in range(3):
        ref = pss_replica(config, n_id_2)
        corr = np.abs(signal.fftconvolve(x, np.conj(ref[::-1]), mode="valid")) ** 2
        usable = (len(corr) // half) * half
        if usable:
            out[n_id_2] = corr[:usable].reshape(-1, half).sum(axis=0)
        else:
            out[n_id_2, :len(corr)] = corr
    return out


_SSS_BANK: dict[int, np.ndarray] = {}


def _sss_bank(n_id_2: int) -> np.ndarray:
    """(168, 2, 62) SSS hypotheses; axis 1 is subframe 0 / 5."""
    if n_id_2 not in _SSS_BANK:
        _SSS_BANK[n_id_2] = np.array([[phy.sss_sequence(g, n_id_2, 0),
                                       phy.sss_sequence(g, n_id_2, 5)] for g in range(168)])
    return _SSS_BANK[n_id_2]


def acquire(samples, config: phy.GridConfig, min_peak_ratio: float = 2.0,
            n_frames: float = 2.0) -> AcquisitionResult:
    """Find cell ID and frame start in the first ``n_frames`` of a capture.

    ``config`` supplies the bandwidth; its cell ID is ignored. The returned
    frame start is the first frame boundary at or after sample 0.
    """
    n = int(n_frames * config.frame_length) + config.fft_size
    x = np.asarray(samples[0:min(n, len(samples))], dtype=complex)
    if len(x) < config.frame_length + config.fft_size:
        raise AcquisitionError(
            f"need at least one frame plus one symbol ({config.frame_length + config.fft_size} "
            f"samples), got {len(x)}")

    folded = _folded_pss_metric(x, config)
    n_id_2, pos = np.unravel_index(np.argmax(folded), folded.shape)
    top = folded[n_id_2, pos]
    guard = config.cp_lengths[1]
    half = config.half_frame_length
    mask = np.ones_like(folded, dtype=bool)
    dist = np.abs((np.arange(half) - pos + half // 2) % half - half // 2)
    mask[n_id_2, dist <= guard] = False
    second = folded[mask].max()
    ratio = float(top / second) if second > 0 else float("inf")
    if not np.isfinite(top) or top <= 0 or ratio < min_peak_ratio:
        raise AcquisitionError(
            f"no PSS peak above threshold (peak ratio {ratio:.2f} < {min_peak_ratio})")

    pss_body = config.body_starts[phy.SYNC_SLOTS[0] * phy.SYMBOLS_PER_SLOT + phy.PSS_SYMBOL]
    half_start = int((pos - pss_body) % half)

    sync_k = phy.sync_subcarriers(config)
    bank = _sss_bank(int(n_id_2))
    pss = phy.pss_sequence(int(n_id_2))
    metric = np.zeros((168, 2))
    i = 0
    while True:
        start = half_start + i * half
        last = start + config.body_starts[phy.PSS_SYMBOL] + config.fft_size
        if last > len(x):
            break
        y = phy.demodulate_symbols(x, start, config, [phy.SSS_SYMBOL, phy.PSS_SYMBOL])[:, sync_k]
        h = y[1] / pss
        eq = y[0] * np.conj(h)
        m = np.abs(bank @ eq) ** 2
        metric += m if i % 2 == 0 else m[:, ::-1]
        i += 1
    if i == 0:
        raise AcquisitionError("capture too short for SSS detection")
    n_id_1, parity = np.unravel_index(np.argmax(metric), metric.shape)
    frame_start = (half_start + (half if parity == 1 else 0)) % config.frame_length
    return AcquisitionResult(cell_id=int(3 * n_id_1 + n_id_2),
                             coarse_frame_start=int(frame_start),
                             correlation_peak_ratio=ratio)
