"""R-peak detection and piecewise-linear alignment of a prototype to a query."""

from __future__ import annotations

import numpy as np

from .data import Series, as_array
from .errors import AlignmentUnavailable

DEFAULT_LEAD = 1  # lead II
SAMPLING_RATE = 100.0


def detect_rpeaks(series, lead: int = DEFAULT_LEAD, sampling_rate: float = SAMPLING_RATE,
                  k_std: float = 1.5, refractory_s: float = 0.2) -> np.ndarray:
    """Local maxima above ``mean + k_std * std`` separated by a refractory gap.

    Candidates are accepted greedily by decreasing amplitude (earlier index on
    ties), so of two peaks closer than the gap only the larger survives.
    """
    x = as_array(series)[:, lead]
    T = len(x)
    thr = x.mean() + k_std * x.std()
    left = np.concatenate([[-np.inf], x[:-1]])
    right = np.concatenate([x[1:], [-np.inf]])
    # a flat top counts once, at its first sample
    cand = np.flatnonzero((x > thr) & (x > left) & (x >= right))
    if cand.size == 0:
        return np.zeros(0, dtype=np.int64)
    gap = int(round(refractory_s * sampling_rate))
    order = cand[np.lexsort((cand, -x[cand]))]
    taken = np.zeros(T, dtype=bool)
    accepted = []
    for i in order:
        lo, hi = max(0, i - gap + 1), min(T, i + gap)
        if not taken[lo:hi].any():
            accepted.append(i)
            taken[i] = True
    return np.array(sorted(accepted), dtype=np.int64)


def choose_lead(series, lead: int = DEFAULT_LEAD, **kw) -> int:
    """Lead II unless it yields fewer than two peaks; then the widest-range lead."""
    x = as_array(series)
    if lead >= x.shape[1]:
        lead = 0
    if len(detect_rpeaks(x, lead, **kw)) >= 2:
        return lead
    ptp = np.ptp(x, axis=0)
    return int(np.argmax(ptp))


def normalize_peak_count(proto, proto_peaks, query_peaks):
    """Make the prototype's beat count match the query's.

    More prototype beats: leading beats are dropped, cutting midway between
    the last dropped and first kept peak. Fewer: zeros are prepended so the
    first prototype peak lands on the matching query beat, then the series is
    right-cropped to its original length.
    """
    x = as_array(proto)
    p = np.asarray(proto_peaks, dtype=np.int64)
    q = np.asarray(query_peaks, dtype=np.int64)
    if q.size == 0:
        raise ValueError("query has no R-peaks")
    if p.size == 0:
        raise AlignmentUnavailable("no R-peaks detected in the prototype")
    T = x.shape[0]
    if p.size == q.size:
        return x.copy(), p.copy()
    if p.size > q.size:
        drop = p.size - q.size
        cut = (int(p[drop - 1]) + int(p[drop])) // 2 + 1
        return x[cut:].copy(), p[drop:] - cut
    d = q.size - p.size
    pad = max(0, int(q[d]) - int(p[0]))
    grown = np.concatenate([np.zeros((pad, x.shape[1])), x])[:T]
    shifted = p + pad
    return grown, shifted[shifted < T]


def _matched(p2: np.ndarray, q: np.ndarray, n_proto_before: int) -> np.ndarray:
    """Query peaks paired with the normalized prototype peaks."""
    if n_proto_before >= q.size:
        return q[: p2.size]
    d = q.size - n_proto_before
    return q[d: d + p2.size]


def warp_to_peaks(proto: np.ndarray, proto_peaks, query_peaks, out_len: int) -> np.ndarray:
    """Piecewise-linear resampling sending ``proto_peaks[k]`` to ``query_peaks[k]``.

    Regions before the first and after the last pair are mapped from the
    prototype's own head and tail; zero-length source segments repeat the
    boundary sample.
    """
    x = as_array(proto)
    Tp = x.shape[0]
    kt = [0.0] + [float(t) for t in query_peaks] + [float(out_len - 1)]
    ks = [0.0] + [float(s) for s in proto_peaks] + [float(Tp - 1)]
    # drop boundary knots that collide with a peak knot
    if len(kt) > 2 and kt[1] == kt[0]:
        kt.pop(0), ks.pop(0)
    if len(kt) > 2 and kt[-2] == kt[-1]:
        kt.pop(), ks.pop()
    t = np.arange(out_len, dtype=np.float64)
    src = np.interp(t, kt, ks)
    grid = np.arange(Tp, dtype=np.float64)
    out = np.empty((out_len, x.shape[1]))
    for c in range(x.shape[1]):
        out[:, c] = np.interp(src, grid, x[:, c])
    return out


def align_prototype(proto, query, lead: int | None = None, return_peaks: bool = False, **kw):
    """Warp ``proto`` so its R-peaks land on the query's, lead by lead."""
    xp = as_array(proto)
    xq = as_array(query)
    if xp.shape[1] != xq.shape[1]:
        raise ValueError("prototype and query differ in channel count")
    if lead is None:
        lead = choose_lead(xq, **kw)
    q = detect_rpeaks(xq, lead, **kw)
    if q.size == 0:
        raise AlignmentUnavailable("no R-peaks detected in the query")
    p = detect_rpeaks(xp, lead, **kw)
    x2, p2 = normalize_peak_count(xp, p, q)
    if p2.size == 0:
        raise AlignmentUnavailable("prototype beats fell outside the cropped window")
    qm = _matched(p2, q, p.size)
    out = warp_to_peaks(x2, p2, qm, xq.shape[0])
    if isinstance(query, Series):
        out = Series(out, getattr(proto, "record_id", ""))
    if return_peaks:
        return out, qm
    return out
