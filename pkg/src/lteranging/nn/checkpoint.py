"""Binary parameter checkpoints with a JSON manifest mirror.

Layout: ``MAGIC`` (8 bytes), version (u32 LE), manifest length (u32 LE),
UTF-8 JSON manifest, then every tensor's values as row-major float64 LE in
manifest order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..iqfile import atomic_write_bytes, atomic_write_text

MAGIC = b"LTERNGCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    tensors = []
    for name, arr in params.items():
        arr = np.asarray(arr, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"tensor {name!r} has non-finite values")
        tensors.append({"name": name, "shape": list(arr.shape)})
    manifest = {"version": VERSION, "tensors": tensors, "meta": meta or {}}
    head = json.dumps(manifest, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(params[t["name"]], dtype="<f8").tobytes()
                    for t in tensors)
    atomic_write_bytes(path, MAGIC + struct.pack("<II", VERSION, len(head)) + head + body)
    atomic_write_text(path.with_suffix(path.suffix + ".json"),
                      json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path):
    """Returns ``(params, meta)``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"checkpoint not found: {path}") from None
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, n = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    manifest = json.loads(raw[16:16 + n])
    offset = 16 + n
    params = {}
    for t in manifest["tensors"]:
        count = int(np.prod(t["shape"], dtype=int))
        end = offset + 8 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated at tensor {t['name']!r}")
        params[t["name"]] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(t["shape"]).copy()
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return params, manifest["meta"]
