"""Synthetic multi-lead beat trains with class-specific morphology.

Used for desk-scale end-to-end runs and the test fixtures. Each record is a
sequence of beats (P wave, QRS complex, T wave) with a random heart rate;
classes differ in QRS width and in T-wave / ST-segment shape.
"""

from __future__ import annotations

import numpy as np

from .data import Dataset, zscore_stats

# per-lead gain; lead 1 plays the role of lead II
LEAD_GAINS = np.array([0.8, 1.2, 0.5, -0.6, 0.9, 0.4, 1.0, 0.7, 0.6, 0.5, 0.9, 1.1])

MORPHOLOGY = {
    "NORM": dict(qrs_width=1.2, r_amp=1.0, t_amp=0.20, st=0.0),
    "MI": dict(qrs_width=1.2, r_amp=0.9, t_amp=-0.30, st=-0.15),
    "CD": dict(qrs_width=3.0, r_amp=0.75, t_amp=0.20, st=0.0),
    "STTC": dict(qrs_width=1.2, r_amp=1.0, t_amp=0.05, st=0.12),
    "HYP": dict(qrs_width=1.6, r_amp=1.8, t_amp=0.25, st=0.0),
}


def _gauss(t, centre, width, amp):
    return amp * np.exp(-0.5 * ((t - centre) / width) ** 2)


def beat_train(peaks, n_timesteps, qrs_width=1.2, r_amp=1.0, t_amp=0.2, st=0.0):
    """Single-lead waveform with R peaks at ``peaks``."""
    t = np.arange(n_timesteps, dtype=np.float64)
    x = np.zeros(n_timesteps)
    for r in peaks:
        x += _gauss(t, r - 16, 2.5, 0.12)
        x += _gauss(t, r - 2.5 * qrs_width, 0.8 * qrs_width, -0.12)
        x += _gauss(t, r, qrs_width, r_amp)
        x += _gauss(t, r + 2.5 * qrs_width, 0.8 * qrs_width, -0.2)
        if st:
            x += _gauss(t, r + 15, 5.0, st)
        x += _gauss(t, r + 32, 6.0, t_amp)
    return x


def make_record(rng, cls, n_timesteps, n_channels, noise=0.02):
    labels = cls if isinstance(cls, (list, tuple)) else [cls]
    m = dict(MORPHOLOGY[labels[0]])
    for extra in labels[1:]:
        e = MORPHOLOGY[extra]
        m["qrs_width"] = max(m["qrs_width"], e["qrs_width"])
        m["t_amp"] = (m["t_amp"] + e["t_amp"]) / 2
        m["st"] = m["st"] + e["st"]
    rr = rng.uniform(70, 100)
    first = rng.uniform(15, 15 + rr)
    peaks = np.arange(first, n_timesteps - 5, rr).round()
    peaks = peaks + rng.integers(-2, 3, size=peaks.size)
    amp = rng.uniform(0.9, 1.1)
    base = beat_train(peaks, n_timesteps, m["qrs_width"], m["r_amp"] * amp, m["t_amp"] * amp,
                      m["st"] * amp)
    gains = np.resize(LEAD_GAINS, n_channels) * rng.uniform(0.9, 1.1, size=n_channels)
    t = np.arange(n_timesteps)
    wander = 0.03 * np.sin(2 * np.pi * t / rng.uniform(300, 600) + rng.uniform(0, 2 * np.pi))
    x = base[:, None] * gains[None, :] + wander[:, None]
    x += noise * rng.standard_normal(x.shape)
    return x


def make_dataset(n_per_class=200, n_timesteps=500, n_channels=4,
                 classes=("NORM", "MI", "CD"), seed=0, multi_label=0,
                 prefix="r", stats=None) -> Dataset:
    """Generate a normalized synthetic dataset.

    ``multi_label`` extra records carry the first two classes jointly. Pass
    the training ``stats`` when generating a query set so both share one scale.
    Values are float32-representable so the dataset round-trips bit-exactly.
    """
    rng = np.random.default_rng(seed)
    classes = list(classes)
    plan = [[c] for c in classes for _ in range(n_per_class)]
    plan += [classes[:2] for _ in range(multi_label)]
    order = rng.permutation(len(plan))
    X = np.empty((len(plan), n_timesteps, n_channels))
    Y = np.zeros((len(plan), len(classes)), dtype=np.uint8)
    for row, i in enumerate(order):
        X[row] = make_record(rng, plan[i], n_timesteps, n_channels)
        for c in plan[i]:
            Y[row, classes.index(c)] = 1
    stats = stats or zscore_stats(X)
    Xn = ((X - stats.mu) / (stats.sigma + 1e-7)).astype(np.float32).astype(np.float64)
    ids = [f"{prefix}{i:05d}" for i in range(len(plan))]
    return Dataset(Xn, Y, ids, classes, stats)
