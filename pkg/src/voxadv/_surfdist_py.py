"""Pure numpy fallback for directed nearest-surface distances."""

from __future__ import annotations

import numpy as np

_CHUNK = 2048


def directed_min_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For each point in ``a`` (N, 3), the Euclidean distance to the nearest
    point in ``b`` (M, 3)."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if len(b) == 0:
        raise ValueError("reference point set is empty")
    out = np.empty(len(a), dtype=np.float64)
    for start in range(0, len(a), _CHUNK):
        chunk = a[start:start + _CHUNK]
        d2 = ((chunk[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        out[start:start + _CHUNK] = np.sqrt(d2.min(axis=1))
    return out
