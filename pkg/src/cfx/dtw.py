"""Multichannel dynamic time warping with an optional Sakoe-Chiba band."""

from __future__ import annotations

import numba as nb
import numpy as np

from .data import as_array
from .errors import ShapeError

nb.config.THREADING_LAYER = "omp"


@nb.njit(cache=True, nogil=True)
def _dtw(a, b, band):
    n, m = a.shape[0], b.shape[0]
    nc = a.shape[1]
    prev = np.full(m + 1, np.inf)
    cur = np.full(m + 1, np.inf)
    prev[0] = 0.0
    for i in range(1, n + 1):
        cur[:] = np.inf
        lo, hi = 1, m
        if band >= 0:
            lo = max(1, i - band)
            hi = min(m, i + band)
        for j in range(lo, hi + 1):
            s = 0.0
            for k in range(nc):
                d = a[i - 1, k] - b[j - 1, k]
                s += d * d
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = np.sqrt(s) + best
        prev, cur = cur, prev
    return prev[m]


@nb.njit(cache=True, parallel=True)
def _dtw_matrix(X, band):
    n = X.shape[0]
    out = np.zeros((n, n))
    for i in nb.prange(n):
        for j in range(i + 1, n):
            d = _dtw(X[i], X[j], band)
            out[i, j] = d
            out[j, i] = d
    return out


def _check_band(band, ta, tb) -> int:
    if band is None:
        return -1
    band = int(band)
    if band < 0:
        raise ValueError("band must be non-negative")
    if band < abs(ta - tb):
        raise ValueError(f"band {band} cannot connect lengths {ta} and {tb}")
    return band


def dtw_distance(a, b, band: int | None = None) -> float:
    """Minimum summed Euclidean cost over unit-step warping paths."""
    a = np.ascontiguousarray(as_array(a))
    b = np.ascontiguousarray(as_array(b))
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"channel mismatch: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] < 1 or b.shape[0] < 1:
        raise ShapeError("empty series")
    return float(_dtw(a, b, _check_band(band, a.shape[0], b.shape[0])))


def default_band(n_timesteps: int) -> int:
    return max(1, n_timesteps // 10)


def pairwise_dtw(records, band: int | None = None) -> np.ndarray:
    X = np.ascontiguousarray(np.stack([as_array(r) for r in records]))
    if X.shape[0] < 2:
        raise ValueError("need at least two records for a distance matrix")
    return _dtw_matrix(X, _check_band(band, X.shape[1], X.shape[1]))
