"""Carrier-phase tracking loop and the frame-rate TOA update it drives."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .. import phy
from .estimation import CfrEstimate

DAMPING = 1 / math.sqrt(2)
EQ1_MODES = ("literal", "dimensional")


@dataclass(frozen=True)
class TrackingState:
    toa_samples: float  # tracked TOA in samples
    carrier_phase_rad: float  # predicted carrier phase for the current frame
    doppler_hz: float
    freq_acc: float = 0.0  # loop-filter integrator, rad/s
    v_pll: float = 0.0  # loop-filter output, rad/s
    discriminator: float = 0.0
    lock_metric: float = 1.0
    locked: bool = True
    frame: int = 0

    @classmethod
    def start(cls, toa_samples: float, carrier_phase_rad: float = 0.0,
              doppler_hz: float = 0.0, frame: int = 0) -> "TrackingState":
        w = 2 * math.pi * doppler_hz
        return cls(toa_samples, carrier_phase_rad, doppler_hz, freq_acc=w, v_pll=w, frame=frame)


def loop_gains(loop_bandwidth_hz: float, damping: float = DAMPING) -> tuple[float, float]:
    """Natural frequency (rad/s) and proportional gain of a 2nd-order loop."""
    wn = 8 * damping * loop_bandwidth_hz / (4 * damping ** 2 + 1)
    return wn, 2 * damping * wn


def toa_update(toa_samples: float, v_pll: float, frame_period_s: float,
               sample_period_s: float, mode: str = "dimensional",
               carrier_frequency_hz: float | None = None) -> float:
    """Advance the TOA by one frame of loop-filter output.

    ``v_pll`` is in rad/s and is converted to cycles/s. In ``literal`` mode a
    sustained 1 cycle/s moves the TOA by exactly ``frame_period_s /
    sample_period_s`` samples. ``dimensional`` additionally divides by the
    carrier frequency, turning carrier cycles into propagation delay.
    """
    cycles = v_pll / (2 * math.pi)
    if mode == "literal":
        scale = 1.0
    elif mode == "dimensional":
        if not carrier_frequency_hz:
            raise ValueError("dimensional TOA update needs the carrier frequency")
        scale = 1.0 / carrier_frequency_hz
    else:
        raise ValueError(f"unknown eq1 mode {mode!r}; expected one of {EQ1_MODES}")
    return toa_samples - (frame_period_s / sample_period_s) * cycles * scale


def discriminator(cfr: CfrEstimate, carrier_phase_rad: float) -> float:
    """Phase of the CFR integrated over all comb subcarriers, relative to the NCO."""
    return float(np.angle(np.sum(cfr.values) * np.exp(-1j * carrier_phase_rad)))


def pll_step(state: TrackingState, cfr: CfrEstimate, loop_bandwidth_hz: float = 5.0, *,
             sample_period_s: float, frame_period_s: float = phy.FRAME_DURATION_S,
             eq1_mode: str = "dimensional",
             carrier_frequency_hz: float | None = None) -> TrackingState:
    """One frame of carrier tracking followed by the TOA update."""
    if not np.all(np.isfinite(cfr.values)) or not np.any(cfr.values):
        return replace(state, locked=False, lock_metric=0.0, frame=state.frame + 1)
    wn, kp = loop_gains(loop_bandwidth_hz)
    e = discriminator(cfr, state.carrier_phase_rad)
    freq_acc = state.freq_acc + wn * wn * frame_period_s * e
    v = freq_acc + kp * e
    lock_metric = 0.9 * state.lock_metric + 0.1 * math.cos(2 * e)
    toa = toa_update(state.toa_samples, v, frame_period_s, sample_period_s,
                     eq1_mode, carrier_frequency_hz)
    return TrackingState(
        toa_samples=toa,
        carrier_phase_rad=state.carrier_phase_rad + v * frame_period_s,
        doppler_hz=v / (2 * math.pi),
        freq_acc=freq_acc,
        v_pll=v,
        discriminator=e,
        lock_metric=lock_metric,
        locked=lock_metric > 0.5,
        frame=state.frame + 1,
    )
