"""Software LTE receiver: acquisition, CRS channel estimation, tracking."""

from .acquisition import AcquisitionError, AcquisitionResult, acquire
from .capture import (BlockStream, CirSample, Receiver, ReceiverConfig, ReceiverOutput,
                      process_capture, read_cir_dataset, read_tracking_log, remove_clock_bias,
                      write_cir_dataset, write_tracking_log)
from .estimation import (CfrEstimate, EstimationError, coarse_doppler, esprit, esprit_delays,
                         estimate_cfr, extract_cir)
from .tracking import TrackingState, loop_gains, pll_step, toa_update

__all__ = [
    "AcquisitionError", "AcquisitionResult", "acquire", "BlockStream", "CirSample", "Receiver",
    "ReceiverConfig", "ReceiverOutput", "process_capture", "read_cir_dataset",
    "read_tracking_log", "remove_clock_bias", "write_cir_dataset", "write_tracking_log",
    "CfrEstimate", "EstimationError", "coarse_doppler", "esprit", "esprit_delays",
    "estimate_cfr", "extract_cir", "TrackingState", "loop_gains", "pll_step", "toa_update",
]
