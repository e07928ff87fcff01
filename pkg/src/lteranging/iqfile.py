"""Raw IQ captures: interleaved little-endian float32 I/Q plus a JSON sidecar."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

_DTYPE = np.dtype("<f4")


@dataclass
class IqMetadata:
    sampling_rate_hz: float
    carrier_frequency_hz: float
    start_time: float
    cell_id: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def sidecar_path(iq_path) -> Path:
    return Path(iq_path).with_suffix(".json")


def write_metadata(iq_path, meta: IqMetadata) -> None:
    atomic_write_text(sidecar_path(iq_path), meta.to_json() + "\n")


def read_metadata(iq_path) -> IqMetadata:
    path = sidecar_path(iq_path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise OSError(f"cannot read IQ sidecar {path}: {exc}") from exc
    return IqMetadata(**doc)


def to_interleaved(samples: np.ndarray) -> np.ndarray:
    out = np.empty(2 * len(samples), dtype=_DTYPE)
    out[0::2] = samples.real
    out[1::2] = samples.imag
    return out


class IqWriter:
    """Append complex sample blocks to a capture file."""

    def __init__(self, path, meta: IqMetadata):
        self.path = Path(path)
        self.meta = meta
        try:
            self._fh = open(self.path, "wb")
        except OSError as exc:
            raise OSError(f"cannot open IQ file {self.path}: {exc}") from exc

    def write(self, samples: np.ndarray) -> None:
        self._fh.write(to_interleaved(np.asarray(samples)).tobytes())

    def close(self) -> None:
        self._fh.close()
        write_metadata(self.path, self.meta)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_iq(path, samples: np.ndarray, meta: IqMetadata) -> None:
    with IqWriter(path, meta) as w:
        w.write(samples)


class IqCapture:
    """Random-access view of a capture file; slicing yields complex128."""

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            raise FileNotFoundError(f"IQ file not found: {self.path}")
        self.meta = read_metadata(self.path)
        self._raw = np.memmap(self.path, dtype=_DTYPE, mode="r")
        if len(self._raw) % 2:
            raise ValueError(f"IQ file {self.path} has an odd number of floats")

    def __len__(self) -> int:
        return len(self._raw) // 2

    def __getitem__(self, key: slice) -> np.ndarray:
        start, stop, step = key.indices(len(self))
        if step != 1:
            raise ValueError("IQ capture supports contiguous slices only")
        raw = np.asarray(self._raw[2 * start:2 * stop], dtype=float)
        return raw[0::2] + 1j * raw[1::2]


def read_iq(path) -> tuple[np.ndarray, IqMetadata]:
    cap = IqCapture(path)
    return cap[0:len(cap)], cap.meta


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
