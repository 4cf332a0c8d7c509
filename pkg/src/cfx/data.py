"""Records, labels, normalization and the on-disk dataset format.

A dataset directory holds three files:

* ``manifest.json``  shape, class list and the normalization constants
* ``signals.f32``    little-endian float32, row-major ``[record][time][channel]``
* ``labels.csv``     ``record_id,CLASS1;CLASS2`` one row per record

Signals are stored in model space, i.e. already normalized; ``mu``/``sigma``
record the statistics that were applied.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError, ShapeError

EPS = 1e-7

# PTB-XL training-set statistics
PTBXL_MU = -0.0008313
PTBXL_SIGMA = 0.2357998


@dataclass(frozen=True)
class Series:
    values: np.ndarray
    record_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 2 or v.shape[1] < 1:
            raise ShapeError(f"series must be T x C with T >= 2, C >= 1; got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DataFormatError(f"series {self.record_id!r} has non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape


def as_array(x) -> np.ndarray:
    """Return the (T, C) float array behind a Series or array-like."""
    v = np.asarray(getattr(x, "values", x), dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    return v


@dataclass(frozen=True)
class NormStats:
    mu: float
    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


@dataclass
class Dataset:
    signals: np.ndarray  # (N, T, C) float64
    labels: np.ndarray  # (N, L) uint8
    record_ids: list[str]
    class_names: list[str]
    stats: NormStats = field(default_factory=lambda: NormStats(0.0, 1.0))

    def __post_init__(self):
        self.signals = np.asarray(self.signals, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.signals.ndim != 3:
            raise ShapeError("signals must be (N, T, C)")
        n = self.signals.shape[0]
        if self.labels.shape != (n, len(self.class_names)):
            raise ShapeError(
                f"labels shape {self.labels.shape} does not match "
                f"({n}, {len(self.class_names)})"
            )
        if len(self.record_ids) != n:
            raise ShapeError("record_ids and signals differ in length")
        if len(self.class_names) < 2:
            raise ShapeError("need at least two classes")

    def __len__(self):
        return self.signals.shape[0]

    @property
    def n_timesteps(self) -> int:
        return self.signals.shape[1]

    @property
    def n_channels(self) -> int:
        return self.signals.shape[2]

    def series(self, i: int) -> Series:
        return Series(self.signals[i], self.record_ids[i])

    def index_of(self, record_id: str) -> int:
        try:
            return self.record_ids.index(record_id)
        except ValueError:
            raise KeyError(f"unknown record id {record_id!r}") from None

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        return Dataset(
            self.signals[idx],
            self.labels[idx],
            [self.record_ids[i] for i in idx],
            list(self.class_names),
            self.stats,
        )


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def to_f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def read_f32(path, shape) -> np.ndarray:
    path = Path(path)
    expected = int(np.prod(shape)) * 4
    size = path.stat().st_size
    if size != expected:
        raise DataFormatError(
            f"{path}: byte count {size} != {expected} expected for shape {tuple(shape)}"
        )
    arr = np.fromfile(path, dtype="<f4").reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise DataFormatError(f"{path}: non-finite value in signal data")
    return arr.astype(np.float64)


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.is_dir():
        raise DataFormatError(f"dataset directory not found: {path}")
    for name in ("manifest.json", "signals.f32", "labels.csv"):
        if not (path / name).is_file():
            raise DataFormatError(f"missing {name} in {path}")

    with open(path / "manifest.json") as fh:
        man = json.load(fh)
    try:
        n, t, c = int(man["n_records"]), int(man["n_timesteps"]), int(man["n_channels"])
        classes = [str(x) for x in man["classes"]]
        stats = NormStats(float(man["mu"]), float(man["sigma"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"malformed manifest: {exc}") from exc

    signals = read_f32(path / "signals.f32", (n, t, c))

    col = {name: j for j, name in enumerate(classes)}
    ids, rows = [], []
    with open(path / "labels.csv", newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            rid = row[0]
            field_ = row[1] if len(row) > 1 else ""
            bits = np.zeros(len(classes), dtype=np.uint8)
            for name in filter(None, (s.strip() for s in field_.split(";"))):
                if name not in col:
                    raise DataFormatError(f"record {rid!r} references unknown class {name!r}")
                bits[col[name]] = 1
            ids.append(rid)
            rows.append(bits)
    if len(ids) != n:
        raise DataFormatError(f"labels.csv has {len(ids)} rows, manifest says {n}")
    labels = np.array(rows, dtype=np.uint8).reshape(n, len(classes))
    return Dataset(signals, labels, ids, classes, stats)


def write_dataset(dataset: Dataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n, t, c = dataset.signals.shape
    manifest = {
        "n_records": n,
        "n_timesteps": t,
        "n_channels": c,
        "classes": list(dataset.class_names),
        "mu": float(dataset.stats.mu),
        "sigma": float(dataset.stats.sigma),
    }
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for rid, bits in zip(dataset.record_ids, dataset.labels):
        w.writerow([rid, ";".join(dataset.class_names[j] for j in np.flatnonzero(bits))])
    atomic_write_bytes(path / "signals.f32", to_f32_bytes(dataset.signals))
    atomic_write_text(path / "labels.csv", buf.getvalue())
    atomic_write_text(path / "manifest.json", json.dumps(manifest, indent=2) + "\n")


def zscore_stats(dataset) -> NormStats:
    x = np.asarray(getattr(dataset, "signals", dataset), dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot compute statistics of an empty dataset")
    return NormStats(float(x.mean()), float(x.std()))


def normalize(series, stats: NormStats):
    out = (as_array(series) - stats.mu) / (stats.sigma + EPS)
    if isinstance(series, Series):
        return Series(out, series.record_id)
    return out


def denormalize(series, stats: NormStats):
    out = as_array(series) * (stats.sigma + EPS) + stats.mu
    if isinstance(series, Series):
        return Series(out, series.record_id)
    return out


def shift_series(series, tau: int):
    """Displace along time by ``tau`` samples, replicating the edge sample."""
    x = as_array(series)
    T = x.shape[0]
    tau = int(tau)
    if abs(tau) >= T:
        raise ValueError(f"|tau|={abs(tau)} must be < T={T}")
    if tau == 0:
        out = x.copy()
    elif tau > 0:
        out = np.concatenate([np.repeat(x[:1], tau, axis=0), x[:-tau]])
    else:
        out = np.concatenate([x[-tau:], np.repeat(x[-1:], -tau, axis=0)])
    if isinstance(series, Series):
        return Series(out, series.record_id)
    return out
