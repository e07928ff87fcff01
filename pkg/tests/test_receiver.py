import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lteranging import channel, phy
from lteranging.receiver import (
    AcquisitionError, CfrEstimate, EstimationError, TrackingState, acquire, coarse_doppler,
    esprit, esprit_delays, estimate_cfr, extract_cir, pll_step, remove_clock_bias, toa_update,
)
from lteranging.receiver.tracking import discriminator

C = channel.SPEED_OF_LIGHT
COMB_HZ = 6 * 15e3


@pytest.fixture(scope="module")
def cell383():
    cfg = phy.make_grid_config(10, 383)
    refs = phy.generate_reference_signals(cfg)
    frames = [phy.ofdm_modulate(phy.build_frame_grid(cfg, refs, k, 2), cfg) for k in range(3)]
    return cfg, refs, np.concatenate(frames)


def comb_cfr(delays_s, gains, n=100):
    f = COMB_HZ * np.arange(n)
    values = sum(g * np.exp(-2j * np.pi * f * t) for t, g in zip(delays_s, gains))
    return CfrEstimate.uniform(values)


def noisy(x, snr_db, rng):
    return channel.add_noise(x, snr_db, rng)


# -- acquisition ------------------------------------------------------------------


def test_acquisition_recovers_cell_and_offset(cell383):
    cfg, _, tx = cell383
    x = np.r_[np.zeros(10_000, dtype=complex), tx]
    acq = acquire(x, cfg)
    assert acq.cell_id == 383
    assert abs(acq.coarse_frame_start - 10_000) <= cfg.cp_lengths[1] // 2
    assert acq.correlation_peak_ratio >= 2.0


def test_acquisition_fails_on_noise(cell383):
    cfg, _, tx = cell383
    rng = np.random.default_rng(0)
    x = (rng.normal(size=len(tx)) + 1j * rng.normal(size=len(tx))) / np.sqrt(2)
    with pytest.raises(AcquisitionError):
        acquire(x, cfg)


def test_acquisition_rejects_short_capture(cell383):
    cfg, _, tx = cell383
    with pytest.raises(AcquisitionError):
        acquire(tx[:cfg.frame_length // 2], cfg)


def test_acquisition_at_ten_db_monte_carlo():
    cfg = phy.make_grid_config(1.4, 383)
    refs = phy.generate_reference_signals(cfg)
    tx = np.concatenate([phy.ofdm_modulate(phy.build_frame_grid(cfg, refs, k, 4), cfg)
                         for k in range(3)])
    rng = np.random.default_rng(123)
    correct = 0
    for _ in range(100):
        off = int(rng.integers(0, cfg.frame_length))
        x = noisy(tx[cfg.frame_length - off:], 10.0, rng)
        try:
            acq = acquire(x, cfg)
        except AcquisitionError:
            continue
        correct += acq.cell_id == 383
    assert correct >= 99


# -- CFR ------------------------------------------------------------------------


def test_identity_channel_gives_unit_cfr(cell383):
    cfg, refs, tx = cell383
    grid = phy.ofdm_demodulate(tx, 0, cfg)
    for sym in (0, 4, 7):
        cfr = estimate_cfr(grid, refs, sym)
        assert len(cfr) == cfg.used_subcarriers // 6
        assert np.max(np.abs(cfr.values - 1)) < 1e-9


def test_non_crs_symbol_rejected(cell383):
    cfg, refs, tx = cell383
    with pytest.raises(EstimationError):
        estimate_cfr(phy.ofdm_demodulate(tx, 0, cfg), refs, 2)


def test_single_tap_phase_slope_recovers_delay(cell383):
    cfg, refs, tx = cell383
    d = 5  # samples, inside the CP
    y = channel.multipath_filter(tx, [d], [0.8])
    cfr = estimate_cfr(phy.ofdm_demodulate(y, 0, cfg), refs, 7)
    slope = np.polyfit(cfr.frequencies_hz, np.unwrap(np.angle(cfr.values)), 1)[0]
    tau = -slope / (2 * np.pi)
    assert abs(tau - d * cfg.sample_period_s) < 0.01 * d * cfg.sample_period_s
    assert np.allclose(np.abs(cfr.values), 0.8)


def test_two_tap_cfr_fades_periodically(cell383):
    cfg, refs, tx = cell383
    g = np.array([1.0, 0.6])
    y = channel.multipath_filter(tx, [0, 16], g)
    cfr = estimate_cfr(phy.ofdm_demodulate(y, 0, cfg), refs, 7)
    dtau = 16 * cfg.sample_period_s
    expected = g[0] + g[1] * np.exp(-2j * np.pi * cfr.frequencies_hz * dtau)
    assert np.max(np.abs(cfr.values - expected)) < 1e-9
    # fades repeat every 1/dtau in frequency
    mag = np.abs(cfr.values)
    assert mag.min() == pytest.approx(0.4, abs=0.05)
    assert mag.max() == pytest.approx(1.6, abs=0.05)


# -- ESPRIT -------------------------------------------------------------------------


def test_esprit_single_exponential():
    delays = esprit_delays(comb_cfr([250e-9], [1.0]), 1)
    assert abs(delays[0] - 250e-9) < 1e-12


def test_esprit_two_paths():
    delays, amps = esprit(comb_cfr([100e-9, 400e-9], [1.0, 0.5j]), 2)
    assert np.all(np.abs(delays - [100e-9, 400e-9]) < 1e-9)
    assert np.allclose(amps, [1.0, 0.5j], atol=1e-6)


def test_esprit_on_lte_comb_with_dc_gap(cell383):
    cfg, refs, tx = cell383
    y = channel.multipath_filter(tx, [3, 9], [1.0, 0.5])
    cfr = estimate_cfr(phy.ofdm_demodulate(y, 0, cfg), refs, 0)
    delays = esprit_delays(cfr, 2)
    assert np.allclose(delays, np.array([3, 9]) * cfg.sample_period_s, atol=1e-9)


def test_esprit_order_errors():
    cfr = comb_cfr([100e-9], [1.0])
    with pytest.raises(EstimationError):
        esprit(cfr, 0)
    with pytest.raises(EstimationError):
        esprit(cfr, 60)
    with pytest.raises(EstimationError):
        esprit(CfrEstimate.uniform(np.zeros(100)), 1)


def test_esprit_randomized_within_two_percent():
    resolution = 1 / (100 * COMB_HZ)
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n_paths = int(rng.integers(1, 4))
        delays = [rng.uniform(100e-9, 300e-9)]
        while len(delays) < n_paths:
            delays.append(delays[-1] + rng.uniform(2.2, 4.0) * resolution)
        gains = rng.uniform(0.5, 1.0, n_paths) * np.exp(2j * np.pi * rng.random(n_paths))
        cfr = comb_cfr(delays, gains)
        cfr = cfr.with_values(noisy(cfr.values, 30.0, rng))
        est = np.array(esprit_delays(cfr, n_paths))
        assert np.all(np.abs(est - delays) < 0.02 * np.array(delays)), seed


# -- Doppler ----------------------------------------------------------------------------


def test_coarse_doppler_examples():
    a = comb_cfr([200e-9], [1.0])
    assert abs(coarse_doppler(a, a, 0.5e-3)) < 1e-9
    b = a.with_values(a.values * np.exp(1j * np.pi / 2))
    assert coarse_doppler(a, b, 0.5e-3) == pytest.approx(500.0)
    # a full turn between snapshots aliases to zero
    dt = 0.5e-3
    full = a.with_values(a.values * np.exp(2j * np.pi * (1 / dt) * dt))
    assert abs(coarse_doppler(a, full, dt)) < 1e-6


def test_coarse_doppler_errors():
    a = comb_cfr([0.0], [1.0])
    with pytest.raises(EstimationError):
        coarse_doppler(a, a, 0.0)
    with pytest.raises(EstimationError):
        coarse_doppler(a.with_values(np.zeros(100)), a, 1e-3)


# -- tracking ---------------------------------------------------------------------------

TS = 1 / 15.36e6
TF = 0.01


def test_literal_toa_update_scale():
    # one cycle per second sustained for a frame moves the TOA by T_f / T_s samples
    moved = toa_update(0.0, 2 * np.pi, TF, TS, "literal")
    assert abs(-moved - TF / TS) < 1e-9 * TF / TS
    assert -moved == pytest.approx(153_600.0, rel=1e-12)


def test_dimensional_toa_update_divides_by_carrier():
    fc = 2.145e9
    moved = toa_update(10.0, 2 * np.pi, TF, TS, "dimensional", fc)
    assert (10.0 - moved) == pytest.approx(TF / TS / fc, rel=1e-12)
    with pytest.raises(ValueError):
        toa_update(0.0, 1.0, TF, TS, "dimensional")
    with pytest.raises(ValueError):
        toa_update(0.0, 1.0, TF, TS, "bogus")


def test_static_channel_leaves_toa_unchanged():
    state = TrackingState.start(123.25)
    cfr = comb_cfr([0.0], [1.0])
    for _ in range(5):
        state = pll_step(state, cfr, sample_period_s=TS, carrier_frequency_hz=2e9)
    assert state.toa_samples == 123.25
    assert state.v_pll == 0.0


def test_discriminator_reports_phase_step():
    cfr = comb_cfr([0.0], [np.exp(1j * np.pi / 4)])
    assert discriminator(cfr, 0.0) == pytest.approx(np.pi / 4)
    state = pll_step(TrackingState.start(0.0), cfr, sample_period_s=TS, carrier_frequency_hz=2e9)
    assert state.discriminator == pytest.approx(np.pi / 4)


def test_zero_energy_cfr_holds_state_and_flags_lock():
    state = TrackingState.start(7.0, doppler_hz=3.0)
    out = pll_step(state, comb_cfr([0.0], [0.0]), sample_period_s=TS, carrier_frequency_hz=2e9)
    assert not out.locked
    assert out.toa_samples == 7.0 and out.doppler_hz == 3.0


def test_pll_pulls_in_constant_doppler():
    # the loop samples the carrier once per frame, so 50 Hz sits at the
    # Nyquist edge; it starts from a coarse estimate as the receiver does
    f_true, phi0 = 50.0, 0.3
    state = TrackingState.start(0.0, phi0, doppler_hz=46.0)
    for k in range(50):
        cfr = comb_cfr([0.0], [np.exp(1j * (phi0 + 2 * np.pi * f_true * k * TF))])
        state = pll_step(state, cfr, 5.0, sample_period_s=TS, carrier_frequency_hz=2e9)
    assert abs(state.doppler_hz - f_true) < 1.0


def test_discriminator_decays_on_static_channel():
    # start as the receiver does: NCO phase taken from a noisy first CFR; a
    # type-2 loop undershoots about 20% of a phase step, so the residual
    # here is kept small enough for that undershoot to stay under 0.05 rad
    rng = np.random.default_rng(4)
    base = comb_cfr([0.0], [np.exp(1j * 1.0)])
    first = base.with_values(noisy(base.values, 20.0, rng))
    state = TrackingState.start(0.0, discriminator(first, 0.0) - 0.2)
    errs = []
    for _ in range(200):
        cfr = base.with_values(noisy(base.values, 20.0, rng))
        state = pll_step(state, cfr, 5.0, sample_period_s=TS, carrier_frequency_hz=2e9)
        errs.append(abs(state.discriminator))
    medians = [np.median(errs[i:i + 10]) for i in range(0, 200, 10)]
    for a, b in zip(medians, medians[1:]):
        if a < 0.05:
            break
        assert b <= a + 1e-12
    assert max(medians[3:]) < 0.05


# -- CIR ---------------------------------------------------------------------------------


def test_flat_cfr_gives_impulse():
    cir = extract_cir(CfrEstimate.uniform(np.ones(100)), 100)
    assert cir[0] == pytest.approx(1.0)
    assert np.all(cir[1:] < 1e-10)


def test_alignment_moves_tracked_tap_to_zero():
    step = 1 / (100 * COMB_HZ)
    cfr = comb_cfr([3 * step], [1.0])
    assert np.argmax(extract_cir(cfr, 100, 0.0)) == 3
    assert np.argmax(extract_cir(cfr, 100, 3 * step)) == 0
    assert np.argmax(extract_cir(cfr, 100, None)) == 0


def test_cir_parseval():
    rng = np.random.default_rng(2)
    values = rng.normal(size=100) + 1j * rng.normal(size=100)
    cir = extract_cir(CfrEstimate.uniform(values), 100)
    assert abs(np.sum(cir ** 2) - np.sum(np.abs(values) ** 2) / 100) < 1e-9 * np.sum(cir ** 2)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 50.0), st.floats(0.1, 2.0))
def test_peak_alignment_is_idempotent(delay_bins, gain):
    step = 1 / (100 * COMB_HZ)
    cfr = comb_cfr([delay_bins * step, (delay_bins + 7) * step], [gain, 0.3 * gain])
    once = extract_cir(cfr, 100, None)
    assert np.argmax(once) == 0
    aligned = cfr.shifted(delay_bins * step)
    assert np.argmax(extract_cir(aligned, 100, None)) == 0
    assert np.all(once >= 0)


def test_cir_zero_padding_limits():
    cfr = CfrEstimate.uniform(np.ones(100))
    assert len(extract_cir(cfr, 128)) == 128
    with pytest.raises(EstimationError):
        extract_cir(cfr, 129)
    with pytest.raises(EstimationError):
        extract_cir(CfrEstimate.uniform(np.zeros(0)), 10)


# -- clock bias ----------------------------------------------------------------------------


def test_constant_bias_removed():
    frames = np.arange(50)
    rover_range = 300 + 0.01 * frames
    bias = 100e-9
    rng = np.random.default_rng(0)
    rover_toa = rover_range / C + bias
    base_toa = 250.0 / C + bias + rng.normal(0, 1e-9, 50)
    out = remove_clock_bias(frames, rover_toa, frames, base_toa, 250.0)
    assert np.sqrt(np.mean((out / C - rover_range / C) ** 2)) < 5e-9


def test_zero_bias_is_identity():
    frames = np.arange(5)
    toa = np.linspace(1e-6, 2e-6, 5)
    out = remove_clock_bias(frames, toa, frames, np.full(5, 250.0 / C), 250.0)
    assert np.allclose(out, toa * C)


def test_missing_base_frame_named():
    with pytest.raises(KeyError, match="17"):
        remove_clock_bias([16, 17], [1e-6, 1e-6], [16], [1e-6], 250.0)
