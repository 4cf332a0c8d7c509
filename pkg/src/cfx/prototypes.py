"""Offline prototype mining: filter, DTW matrix, MDS + k-means, medoids."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .clustering import DistanceMatrix, medoid, select_structure
from .data import Dataset, atomic_write_bytes, atomic_write_text, read_f32, to_f32_bytes
from .dtw import default_band, pairwise_dtw
from .errors import DataFormatError

log = logging.getLogger(__name__)


@dataclass
class MiningConfig:
    band: int | None = None  # None: T // 10; negative: unbanded
    dim_range: tuple[int, int] = (2, 8)
    k_range: tuple[int, int] = (2, 10)
    seed: int = 0
    n_init: int = 20

    def resolve_band(self, n_timesteps: int) -> int | None:
        if self.band is None:
            return default_band(n_timesteps)
        return None if self.band < 0 else int(self.band)


@dataclass
class PrototypeEntry:
    class_index: int
    cluster_index: int
    record_id: str
    series: np.ndarray
    mean_intra_dtw: float
    cluster_size: int = 1


@dataclass
class PrototypeDB:
    class_names: list[str]
    entries: list[PrototypeEntry]
    config: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def for_class(self, class_index: int) -> list[PrototypeEntry]:
        return [e for e in self.entries if e.class_index == class_index]


def filter_samples(dataset: Dataset, model) -> dict[int, list[int]]:
    """Single-label records the model classifies exactly right, per class."""
    pred = model.predict_labels_batch(dataset.signals)
    single = dataset.labels.sum(axis=1) == 1
    correct = np.all(pred == dataset.labels, axis=1)
    keep = single & correct
    out = {}
    for j, name in enumerate(dataset.class_names):
        out[j] = [int(i) for i in np.flatnonzero(keep & (dataset.labels[:, j] == 1))]
        if not out[j]:
            log.warning("class %s has no surviving records after filtering", name)
    return out


def mine_prototypes(dataset: Dataset, model, config: MiningConfig | None = None) -> PrototypeDB:
    config = config or MiningConfig()
    band = config.resolve_band(dataset.n_timesteps)
    kept = filter_samples(dataset, model)
    entries: list[PrototypeEntry] = []
    summary = {}
    for j, name in enumerate(dataset.class_names):
        idx = kept[j]
        info = {"n_filtered": len(idx), "flags": []}
        summary[name] = info
        if not idx:
            info["flags"].append("no_records")
            continue
        ids = [dataset.record_ids[i] for i in idx]
        if len(idx) < 3:
            info["flags"].append("small_class_passthrough")
            d = pairwise_dtw(dataset.signals[idx], band) if len(idx) == 2 else np.zeros((1, 1))
            for c, i in enumerate(idx):
                mean_d = float(d[c].sum() / max(len(idx) - 1, 1))
                entries.append(PrototypeEntry(j, c, dataset.record_ids[i],
                                              dataset.signals[i].copy(), mean_d, 1))
            continue

        D = DistanceMatrix(pairwise_dtw(dataset.signals[idx], band), ids)
        choice = select_structure(
            D,
            range(config.dim_range[0], config.dim_range[1] + 1),
            range(config.k_range[0], config.k_range[1] + 1),
            seed=config.seed,
            n_init=config.n_init,
        )
        if choice.k_truncated:
            info["flags"].append("k_range_truncated")
        info.update(dims=choice.dims, k=choice.k, silhouette=round(choice.silhouette, 6),
                    stress=choice.embedding.stress)
        for c in range(choice.k):
            members = [ids[m] for m in np.flatnonzero(choice.assignment.labels == c)]
            rid = medoid(members, D)
            pos = ids.index(rid)
            others = [ids.index(m) for m in members if m != rid]
            mean_d = float(D.d[pos, others].mean()) if others else 0.0
            i = idx[pos]
            entries.append(PrototypeEntry(j, c, rid, dataset.signals[i].copy(), mean_d,
                                          len(members)))
    cfg = asdict(config)
    cfg["band_resolved"] = band
    return PrototypeDB(list(dataset.class_names), entries, cfg, summary)


def save_db(db: PrototypeDB, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if db.entries:
        signals = np.stack([e.series for e in db.entries])
        shape = list(signals.shape[1:])
    else:
        signals, shape = np.zeros((0,)), [0, 0]
    doc = {
        "library_version": __version__,
        "class_names": db.class_names,
        "n_timesteps": shape[0],
        "n_channels": shape[1],
        "config": db.config,
        "summary": db.summary,
        "entries": [
            {
                "class_index": e.class_index,
                "class": db.class_names[e.class_index],
                "cluster_index": e.cluster_index,
                "record_id": e.record_id,
                "mean_intra_dtw": e.mean_intra_dtw,
                "cluster_size": e.cluster_size,
            }
            for e in db.entries
        ],
    }
    atomic_write_bytes(path / "proto_signals.f32", to_f32_bytes(signals))
    atomic_write_text(path / "prototypes.json", json.dumps(doc, indent=2) + "\n")


def load_db(path) -> PrototypeDB:
    path = Path(path)
    if not (path / "prototypes.json").is_file():
        raise DataFormatError(f"no prototypes.json in {path}")
    with open(path / "prototypes.json") as fh:
        doc = json.load(fh)
    n = len(doc["entries"])
    signals = read_f32(path / "proto_signals.f32", (n, doc["n_timesteps"], doc["n_channels"]))
    entries = [
        PrototypeEntry(e["class_index"], e["cluster_index"], e["record_id"], signals[i],
                       e["mean_intra_dtw"], e.get("cluster_size", 1))
        for i, e in enumerate(doc["entries"])
    ]
    return PrototypeDB(doc["class_names"], entries, doc.get("config", {}), doc.get("summary", {}))
