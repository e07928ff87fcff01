"""CRS channel estimation, ESPRIT delay estimation, Doppler and CIR extraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import phy


class EstimationError(ValueError):
    pass


@dataclass
class CfrEstimate:
    """Channel frequency response on one CRS comb.

    ``subcarrier_index`` is the signed frequency index of each value in
    units of ``subcarrier_spacing_hz`` (15 kHz in LTE), so the comb spacing
    is 6 units except across DC.
    """

    values: np.ndarray
    subcarrier_index: np.ndarray
    symbol_index: int = 0
    subcarrier_spacing_hz: float = phy.SUBCARRIER_SPACING_HZ

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        self.subcarrier_index = np.asarray(self.subcarrier_index)
        if self.values.shape != self.subcarrier_index.shape:
            raise EstimationError("CFR values and subcarrier indices differ in length")

    @classmethod
    def uniform(cls, values, comb_spacing: int = 6, **kw) -> "CfrEstimate":
        values = np.asarray(values)
        return cls(values, comb_spacing * np.arange(len(values)), **kw)

    @property
    def frequencies_hz(self) -> np.ndarray:
        return self.subcarrier_index * self.subcarrier_spacing_hz

    @property
    def comb_spacing_hz(self) -> float:
        return float(np.min(np.diff(self.subcarrier_index))) * self.subcarrier_spacing_hz

    def __len__(self) -> int:
        return len(self.values)

    def shifted(self, delay_s: float) -> "CfrEstimate":
        """Remove ``delay_s`` of propagation delay (multiply by the inverse ramp)."""
        ramp = np.exp(2j * np.pi * self.frequencies_hz * delay_s)
        return CfrEstimate(self.values * ramp, self.subcarrier_index,
                           self.symbol_index, self.subcarrier_spacing_hz)

    def with_values(self, values) -> "CfrEstimate":
        return CfrEstimate(values, self.subcarrier_index, self.symbol_index,
                           self.subcarrier_spacing_hz)


def used_subcarrier_frequency_index(n_used: int) -> np.ndarray:
    half = n_used // 2
    k = np.arange(n_used)
    return np.where(k < half, k - half, k - half + 1)


def estimate_cfr(grid: np.ndarray, ref: phy.ReferenceSignals, symbol_index: int) -> CfrEstimate:
    """Least-squares CFR on the CRS comb of one symbol: received / known."""
    if symbol_index not in ref.crs:
        raise EstimationError(f"symbol {symbol_index} carries no CRS")
    pos = ref.crs_subcarriers[symbol_index]
    row = np.asarray(grid)[symbol_index]
    freq_index = used_subcarrier_frequency_index(len(row))
    return CfrEstimate(row[pos] / ref.crs[symbol_index], freq_index[pos], symbol_index)


def cfr_from_spectrum(spectrum_row: np.ndarray, ref: phy.ReferenceSignals,
                      symbol_index: int) -> CfrEstimate:
    """Same as :func:`estimate_cfr` for a single demodulated symbol."""
    pos = ref.crs_subcarriers[symbol_index]
    freq_index = used_subcarrier_frequency_index(len(spectrum_row))
    return CfrEstimate(spectrum_row[pos] / ref.crs[symbol_index], freq_index[pos], symbol_index)


# ---------------------------------------------------------------------------
# ESPRIT


def _uniform_segments(index: np.ndarray) -> list[slice]:
    step = np.min(np.diff(index))
    breaks = np.flatnonzero(np.diff(index) != step) + 1
    edges = np.r_[0, breaks, len(index)]
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]


def smoothed_covariance(cfr: CfrEstimate, subarray: int | None = None) -> np.ndarray:
    """Forward-backward spatially smoothed covariance over uniform sub-bands.

    Subarrays never straddle a gap in the comb (the DC hole in LTE), so each
    snapshot obeys the same shift invariance.
    """
    segments = _uniform_segments(cfr.subcarrier_index)
    shortest = min(s.stop - s.start for s in segments)
    p = subarray or shortest // 2
    if p < 2 or p > shortest:
        raise EstimationError(f"subarray length {p} invalid for segments of length {shortest}")
    snaps = []
    for seg in segments:
        x = cfr.values[seg]
        for i in range(len(x) - p + 1):
            snaps.append(x[i:i + p])
    s = np.array(snaps).T
    r = s @ s.conj().T / s.shape[1]
    j = np.eye(p)[::-1]
    return 0.5 * (r + j @ r.conj() @ j)


def esprit(cfr: CfrEstimate, model_order: int | None = None, *, max_order: int = 8,
           threshold: float = 1e-3, subarray: int | None = None):
    """ESPRIT delay estimation on a comb CFR.

    Returns ``(delays_s, amplitudes)`` sorted by delay. With
    ``model_order=None`` the order is the number of covariance eigenvalues
    above ``threshold`` times the largest, capped at ``max_order``.
    """
    if len(cfr) < 4:
        raise EstimationError("CFR too short for ESPRIT")
    if model_order is not None and model_order < 1:
        raise EstimationError("model order must be at least 1")
    r = smoothed_covariance(cfr, subarray)
    p = r.shape[0]
    lam, vec = np.linalg.eigh(r)
    lam, vec = lam[::-1], vec[:, ::-1]
    if lam[0] <= 0:
        raise EstimationError("zero-energy CFR")
    if model_order is None:
        model_order = int(np.clip(np.sum(lam > threshold * lam[0]), 1, min(max_order, p - 1)))
    if model_order >= p:
        raise EstimationError(f"model order {model_order} not identifiable with subarray {p}")
    if lam[model_order - 1] <= 1e-12 * lam[0]:
        raise EstimationError(
            f"covariance rank below model order {model_order}")
    es = vec[:, :model_order]
    phi = np.linalg.lstsq(es[:-1], es[1:], rcond=None)[0]
    z = np.linalg.eigvals(phi)
    delays = -np.angle(z) / (2 * np.pi * cfr.comb_spacing_hz)
    delays = np.sort(delays)
    basis = np.exp(-2j * np.pi * np.outer(cfr.frequencies_hz, delays))
    amps = np.linalg.lstsq(basis, cfr.values, rcond=None)[0]
    return delays, amps


def esprit_delays(cfr: CfrEstimate, model_order: int | None = None, **kw) -> list[float]:
    return list(esprit(cfr, model_order, **kw)[0])


def earliest_path(delays, amps, rel_power: float = 0.05) -> float:
    """Earliest delay whose power is at least ``rel_power`` of the strongest."""
    power = np.abs(amps) ** 2
    keep = power >= rel_power * power.max()
    return float(np.min(np.asarray(delays)[keep]))


# ---------------------------------------------------------------------------
# Doppler and CIR


def coarse_doppler(cfr_a: CfrEstimate, cfr_b: CfrEstimate, dt_s: float) -> float:
    """Doppler from the phase rotation between two CFRs on the same comb.

    Unambiguous only for ``|f_D| < 1 / (2 dt_s)``; larger values wrap.
    """
    if dt_s <= 0:
        raise EstimationError("dt_s must be positive")
    if not np.array_equal(cfr_a.subcarrier_index, cfr_b.subcarrier_index):
        raise EstimationError("CFRs lie on different combs")
    acc = np.sum(cfr_b.values * np.conj(cfr_a.values))
    if acc == 0:
        raise EstimationError("zero-energy CFR")
    return float(np.angle(acc) / (2 * np.pi * dt_s))


def cir_length(n_cfr: int, n_cir: int) -> int:
    """FFT size used for a CIR of ``n_cir`` taps from ``n_cfr`` comb values."""
    if n_cir <= n_cfr:
        return n_cfr
    padded = 1 << (n_cfr - 1).bit_length()
    if n_cir > padded:
        raise EstimationError(
            f"n_cir {n_cir} exceeds CFR length {n_cfr} padded to {padded}")
    return padded


def extract_cir(cfr: CfrEstimate, n_cir: int, toa_estimate_s: float | None = 0.0) -> np.ndarray:
    """CIR magnitudes, circularly aligned so the tracked TOA sits at tap 0.

    The alignment is applied as a phase ramp on the CFR, so fractional TOAs
    are honoured. ``toa_estimate_s=None`` aligns on the strongest tap instead.
    """
    if len(cfr) == 0:
        raise EstimationError("empty CFR")
    n_fft = cir_length(len(cfr), n_cir)
    values = cfr.values
    if toa_estimate_s:
        values = cfr.shifted(toa_estimate_s).values
    cir = np.fft.ifft(values, n=n_fft)
    if toa_estimate_s is None:
        cir = np.roll(cir, -int(np.argmax(np.abs(cir))))
    return np.abs(cir[:n_cir])
