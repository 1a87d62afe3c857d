"""Writer for the .fmap interchange format.

Layout: magic ``FMAP`` (4 bytes), u16 version = 1, u32 hp, u32 wp, u32 c,
then hp*wp*c float32 values row-major — everything little-endian. This is
the byte contract shared with the segmentation toolkit; it is implemented
here independently so the two packages stay decoupled.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import WriteError

MAGIC = b"FMAP"
VERSION = 1
_HEADER = struct.Struct("<4sHIII")


def write_fmap(array: np.ndarray, path: str | Path) -> None:
    """Write a (hp, wp, c) float array as a version-1 .fmap file."""
    arr = np.asarray(array)
    if arr.ndim != 3:
        raise WriteError(f"feature grid must be 3-D, got shape {arr.shape}")
    hp, wp, c = arr.shape
    if min(hp, wp, c) < 1:
        raise WriteError(f"feature grid dims must be >= 1, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise WriteError("feature grid contains NaN or Inf")
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    blob = _HEADER.pack(MAGIC, VERSION, hp, wp, c) + payload
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise WriteError(f"cannot write {path}: {exc}") from exc
