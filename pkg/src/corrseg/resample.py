"""Index arithmetic shared by image and mask resizing.

Both samplers use half-pixel centers: output pixel ``i`` maps to source
coordinate ``(i + 0.5) * in_size / out_size - 0.5``. Identity resizes are
exact under this convention.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError


def _source_coords(out_size: int, in_size: int) -> np.ndarray:
    if out_size < 1 or in_size < 1:
        raise ParameterError("resample sizes must be >= 1")
    scale = in_size / out_size
    return (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5


def nearest_indices(out_size: int, in_size: int) -> np.ndarray:
    """Source index per output position, rounding halves up, clipped in range."""
    coords = _source_coords(out_size, in_size)
    return np.clip(np.floor(coords + 0.5).astype(np.int64), 0, in_size - 1)


def bilinear_weights(
    out_size: int, in_size: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-output-position (lower index, upper index, upper weight) triples.

    Coordinates beyond the edges clamp, so both indices coincide there and
    the weight becomes irrelevant.
    """
    coords = np.clip(_source_coords(out_size, in_size), 0.0, in_size - 1.0)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    return lo, hi, coords - lo
