"""LTE downlink physical layer: grid geometry, reference signals, OFDM.

Sequences follow the release-8 conventions (normal cyclic prefix, FDD,
antenna port 0). The resource grid for one frame is a complex array of
shape ``(140, used_subcarriers)``; used-subcarrier index ``k`` runs from the
most negative frequency to the most positive one with DC skipped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

SUBCARRIER_SPACING_HZ = 15_000.0
FRAME_DURATION_S = 0.010
SYMBOLS_PER_SLOT = 7
SLOTS_PER_FRAME = 20
SYMBOLS_PER_FRAME = SYMBOLS_PER_SLOT * SLOTS_PER_FRAME
MAX_CELL_ID = 503
N_RB_MAX = 110

# bandwidth (MHz) -> (resource blocks, fft size)
_BANDWIDTH_TABLE = {
    1.4: (6, 128),
    3.0: (15, 256),
    5.0: (25, 512),
    10.0: (50, 1024),
    15.0: (75, 1536),
    20.0: (100, 2048),
}

PSS_ROOTS = (25, 29, 34)
PSS_SYMBOL = 6  # last symbol of slots 0 and 10
SSS_SYMBOL = 5
SYNC_SLOTS = (0, 10)
CRS_SYMBOLS = (0, 4)  # port 0, normal CP


class PhyError(ValueError):
    """Invalid physical-layer configuration or input."""


@dataclass(frozen=True)
class GridConfig:
    bandwidth_mhz: float
    cell_id: int
    n_rb: int
    fft_size: int
    used_subcarriers: int
    cp_lengths: tuple[int, ...]  # one slot, 7 entries
    subcarrier_spacing_hz: float = SUBCARRIER_SPACING_HZ

    @property
    def sampling_rate_hz(self) -> float:
        return self.fft_size * self.subcarrier_spacing_hz

    @property
    def sample_period_s(self) -> float:
        return 1.0 / self.sampling_rate_hz

    @property
    def slot_length(self) -> int:
        return sum(self.cp_lengths) + SYMBOLS_PER_SLOT * self.fft_size

    @property
    def frame_length(self) -> int:
        return SLOTS_PER_FRAME * self.slot_length

    @property
    def half_frame_length(self) -> int:
        return self.frame_length // 2

    @property
    def symbol_cp(self) -> np.ndarray:
        """CP length of each of the 140 symbols in a frame."""
        return np.tile(np.asarray(self.cp_lengths), SLOTS_PER_FRAME)

    @property
    def symbol_starts(self) -> np.ndarray:
        """Sample offset (from frame start) of each symbol's cyclic prefix."""
        lengths = self.symbol_cp + self.fft_size
        return np.concatenate(([0], np.cumsum(lengths)[:-1]))

    @property
    def body_starts(self) -> np.ndarray:
        """Sample offset of each symbol's FFT body (CP excluded)."""
        return self.symbol_starts + self.symbol_cp

    @property
    def subcarrier_index(self) -> np.ndarray:
        """Signed frequency index (units of 15 kHz) of each used subcarrier."""
        half = self.used_subcarriers // 2
        k = np.arange(self.used_subcarriers)
        return np.where(k < half, k - half, k - half + 1)

    @property
    def fft_bins(self) -> np.ndarray:
        """FFT bin carrying each used subcarrier."""
        return np.mod(self.subcarrier_index, self.fft_size)


def make_grid_config(bandwidth_mhz: float, cell_id: int) -> GridConfig:
    """Standard grid geometry for an LTE channel bandwidth."""
    key = float(bandwidth_mhz)
    if key not in _BANDWIDTH_TABLE:
        raise PhyError(
            f"unsupported bandwidth {bandwidth_mhz} MHz; "
            f"expected one of {sorted(_BANDWIDTH_TABLE)}"
        )
    if not 0 <= int(cell_id) <= MAX_CELL_ID or int(cell_id) != cell_id:
        raise PhyError(f"cell_id {cell_id} outside [0, {MAX_CELL_ID}]")
    n_rb, fft_size = _BANDWIDTH_TABLE[key]
    first = 160 * fft_size // 2048
    other = 144 * fft_size // 2048
    return GridConfig(
        bandwidth_mhz=key,
        cell_id=int(cell_id),
        n_rb=n_rb,
        fft_size=fft_size,
        used_subcarriers=12 * n_rb,
        cp_lengths=(first,) + (other,) * (SYMBOLS_PER_SLOT - 1),
    )


# ---------------------------------------------------------------------------
# Reference signals


def pss_sequence(n_id_2: int) -> np.ndarray:
    """Frequency-domain Zadoff-Chu PSS (62 values)."""
    u = PSS_ROOTS[n_id_2]
    n = np.arange(62)
    m = np.where(n < 31, n * (n + 1), (n + 1) * (n + 2))
    return np.exp(-1j * np.pi * u * m / 63)


def _m_sequence(taps: tuple[int, ...]) -> np.ndarray:
    x = np.zeros(31, dtype=int)
    x[4] = 1
    for i in range(26):
        x[i + 5] = sum(x[i + t] for t in taps) % 2
    return 1 - 2 * x


@lru_cache(maxsize=None)
def _sss_base() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    s = _m_sequence((2, 0))
    c = _m_sequence((3, 0))
    z = _m_sequence((4, 2, 1, 0))
    return s, c, z


def sss_indices(n_id_1: int) -> tuple[int, int]:
    q_prime = n_id_1 // 30
    q = (n_id_1 + q_prime * (q_prime + 1) // 2) // 30
    m_prime = n_id_1 + q * (q + 1) // 2
    m0 = m_prime % 31
    m1 = (m0 + m_prime // 31 + 1) % 31
    return m0, m1


def sss_sequence(n_id_1: int, n_id_2: int, subframe: int) -> np.ndarray:
    """SSS (62 real +/-1 values) for subframe 0 or 5."""
    s_t, c_t, z_t = _sss_base()
    m0, m1 = sss_indices(n_id_1)
    n = np.arange(31)
    s0 = s_t[(n + m0) % 31]
    s1 = s_t[(n + m1) % 31]
    c0 = c_t[(n + n_id_2) % 31]
    c1 = c_t[(n + n_id_2 + 3) % 31]
    z0 = z_t[(n + m0 % 8) % 31]
    z1 = z_t[(n + m1 % 8) % 31]
    d = np.empty(62)
    if subframe == 0:
        d[0::2] = s0 * c0
        d[1::2] = s1 * c1 * z0
    elif subframe == 5:
        d[0::2] = s1 * c0
        d[1::2] = s0 * c1 * z1
    else:
        raise PhyError("SSS exists only in subframes 0 and 5")
    return d.astype(complex)


def gold_sequence(c_init: int, length: int) -> np.ndarray:
    """Length-31 Gold pseudo-random sequence c(n) with Nc = 1600."""
    nc = 1600
    total = nc + length
    x1 = np.zeros(total + 31, dtype=np.uint8)
    x2 = np.zeros(total + 31, dtype=np.uint8)
    x1[0] = 1
    x2[:31] = [(c_init >> i) & 1 for i in range(31)]
    for n in range(total):
        x1[n + 31] = x1[n + 3] ^ x1[n]
        x2[n + 31] = x2[n + 3] ^ x2[n + 2] ^ x2[n + 1] ^ x2[n]
    return (x1[nc:nc + length] ^ x2[nc:nc + length]).astype(int)


@lru_cache(maxsize=4096)
def _crs_sequence(cell_id: int, slot: int, symbol: int) -> np.ndarray:
    c_init = (2**10 * (7 * (slot + 1) + symbol + 1) * (2 * cell_id + 1)
              + 2 * cell_id + 1)
    c = gold_sequence(c_init, 4 * N_RB_MAX)
    r = ((1 - 2 * c[0::2]) + 1j * (1 - 2 * c[1::2])) / np.sqrt(2)
    r.setflags(write=False)
    return r


@dataclass(frozen=True)
class ReferenceSignals:
    """Known reference symbols for one cell.

    ``crs`` maps each CRS-bearing frame symbol index (0..139) to its QPSK
    values; ``crs_subcarriers`` maps it to the used-subcarrier indices they
    occupy.
    """

    cell_id: int
    pss: np.ndarray
    sss: dict[int, np.ndarray]  # subframe (0 or 5) -> 62 values
    crs: dict[int, np.ndarray] = field(repr=False)
    crs_subcarriers: dict[int, np.ndarray] = field(repr=False)

    @property
    def crs_symbols(self) -> list[int]:
        return sorted(self.crs)


def crs_symbol_indices() -> list[int]:
    return [slot * SYMBOLS_PER_SLOT + l for slot in range(SLOTS_PER_FRAME)
            for l in CRS_SYMBOLS]


def generate_reference_signals(config: GridConfig) -> ReferenceSignals:
    cell = config.cell_id
    n_id_1, n_id_2 = divmod(cell, 3)
    v_shift = cell % 6
    m = np.arange(2 * config.n_rb)
    crs, positions = {}, {}
    for sym in crs_symbol_indices():
        slot, l = divmod(sym, SYMBOLS_PER_SLOT)
        v = 0 if l == 0 else 3
        seq = _crs_sequence(cell, slot, l)
        crs[sym] = seq[m + N_RB_MAX - config.n_rb]
        positions[sym] = 6 * m + (v + v_shift) % 6
    return ReferenceSignals(
        cell_id=cell,
        pss=pss_sequence(n_id_2),
        sss={0: sss_sequence(n_id_1, n_id_2, 0), 5: sss_sequence(n_id_1, n_id_2, 5)},
        crs=crs,
        crs_subcarriers=positions,
    )


def sync_subcarriers(config: GridConfig) -> np.ndarray:
    """Used-subcarrier indices of the 62 PSS/SSS elements."""
    return config.used_subcarriers // 2 - 31 + np.arange(62)


def build_frame_grid(config: GridConfig, refs: ReferenceSignals,
                     frame_index: int = 0, payload_seed: int | None = 0) -> np.ndarray:
    """Fill one frame: PSS, SSS, CRS and seeded QPSK payload elsewhere.

    ``payload_seed=None`` leaves non-reference elements empty. The 72-element
    sync band (62 sequence values plus guard) is kept free of payload.
    """
    grid = np.zeros((SYMBOLS_PER_FRAME, config.used_subcarriers), dtype=complex)
    if payload_seed is not None:
        rng = np.random.default_rng([payload_seed, config.cell_id, frame_index])
        bits = rng.integers(0, 2, size=(2,) + grid.shape)
        grid[:] = ((1 - 2 * bits[0]) + 1j * (1 - 2 * bits[1])) / np.sqrt(2)
    sync_k = sync_subcarriers(config)
    guard = np.arange(sync_k[0] - 5, sync_k[-1] + 6)
    for slot in SYNC_SLOTS:
        subframe = slot // 2
        for l in (SSS_SYMBOL, PSS_SYMBOL):
            grid[slot * SYMBOLS_PER_SLOT + l, guard] = 0
        grid[slot * SYMBOLS_PER_SLOT + PSS_SYMBOL, sync_k] = refs.pss
        grid[slot * SYMBOLS_PER_SLOT + SSS_SYMBOL, sync_k] = refs.sss[subframe]
    for sym, values in refs.crs.items():
        grid[sym, refs.crs_subcarriers[sym]] = values
    return grid


# ---------------------------------------------------------------------------
# OFDM


def _check_grid(grid: np.ndarray, config: GridConfig) -> None:
    if grid.shape != (SYMBOLS_PER_FRAME, config.used_subcarriers):
        raise PhyError(
            f"grid shape {grid.shape} does not match "
            f"({SYMBOLS_PER_FRAME}, {config.used_subcarriers})"
        )


def ofdm_modulate(grid: np.ndarray, config: GridConfig) -> np.ndarray:
    """One frame of baseband samples; IFFT scaled by 1/fft_size."""
    _check_grid(grid, config)
    n = config.fft_size
    bins = np.zeros((SYMBOLS_PER_FRAME, n), dtype=complex)
    bins[:, config.fft_bins] = grid
    bodies = np.fft.ifft(bins, axis=1)
    out = np.empty(config.frame_length, dtype=complex)
    for sym, (start, cp) in enumerate(zip(config.symbol_starts, config.symbol_cp)):
        out[start:start + cp] = bodies[sym, n - cp:]
        out[start + cp:start + cp + n] = bodies[sym]
    return out


def demodulate_symbols(samples: np.ndarray, frame_start: int, config: GridConfig,
                       symbols) -> np.ndarray:
    """FFT the given frame symbols (CP stripped); rows are used subcarriers."""
    symbols = np.asarray(symbols)
    starts = frame_start + config.body_starts[symbols]
    if len(symbols) and (starts.min() < 0 or starts.max() + config.fft_size > len(samples)):
        raise PhyError("samples do not cover the requested symbols")
    idx = starts[:, None] + np.arange(config.fft_size)
    spectra = np.fft.fft(np.asarray(samples)[idx], axis=1)
    return spectra[:, config.fft_bins]


def ofdm_demodulate(samples: np.ndarray, frame_start: int, config: GridConfig) -> np.ndarray:
    """Strip CP, FFT (unscaled) and pick the used subcarriers of one frame."""
    if frame_start < 0 or frame_start + config.frame_length > len(samples):
        raise PhyError(
            f"need {config.frame_length} samples from index {frame_start}, "
            f"got {len(samples)} total"
        )
    return demodulate_symbols(samples, frame_start, config, np.arange(SYMBOLS_PER_FRAME))
