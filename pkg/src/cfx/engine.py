"""Query-time counterfactual generation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .alignment import align_prototype, choose_lead, detect_rpeaks
from .classifier import predict_labels
from .data import as_array, atomic_write_bytes, atomic_write_text, read_f32, to_f32_bytes
from .dtw import default_band, dtw_distance
from .errors import AlignmentUnavailable, NoTargetError, PrototypeError, SparsifyError

log = logging.getLogger(__name__)

NORMAL_CLASS = "NORM"
VARIANTS = ("Original", "Sparse", "Aligned Sparse")


@dataclass
class SparsifyConfig:
    initial_keep_ratio: float = 0.10
    keep_ratio_step: float = 0.05
    max_keep_ratio: float = 1.0
    min_segment_len: int = 10
    rpeak_weight: float = 2.0
    rpeak_halfwidth: int = 5

    def __post_init__(self):
        if not 0 < self.initial_keep_ratio <= self.max_keep_ratio <= 1:
            raise ValueError("need 0 < initial_keep_ratio <= max_keep_ratio <= 1")
        if self.keep_ratio_step <= 0:
            raise ValueError("keep_ratio_step must be positive")
        if self.min_segment_len < 1:
            raise ValueError("min_segment_len must be >= 1")

    def schedule(self) -> list[float]:
        out = []
        r = self.initial_keep_ratio
        i = 0
        while r < self.max_keep_ratio - 1e-12:
            out.append(round(r, 10))
            i += 1
            r = self.initial_keep_ratio + i * self.keep_ratio_step
        out.append(self.max_keep_ratio)
        return out


def importance_scores(query, donor, query_peaks, config: SparsifyConfig | None = None) -> np.ndarray:
    config = config or SparsifyConfig()
    q, d = as_array(query), as_array(donor)
    scores = np.abs(d - q)
    T = scores.shape[0]
    near = np.zeros(T, dtype=bool)
    for p in np.asarray(query_peaks, dtype=np.int64):
        near[max(0, p - config.rpeak_halfwidth): min(T, p + config.rpeak_halfwidth + 1)] = True
    scores[near] *= config.rpeak_weight
    return scores


def clean_segments(mask, min_len: int) -> np.ndarray:
    """Zero every run of ones shorter than ``min_len`` in each channel."""
    if min_len < 1:
        raise ValueError("min_len must be >= 1")
    m = np.asarray(mask, dtype=bool)
    out = m.copy()
    if min_len == 1:
        return out
    for c in range(m.shape[1]):
        col = np.concatenate([[0], m[:, c].astype(np.int8), [0]])
        edges = np.diff(col)
        starts = np.flatnonzero(edges == 1)
        ends = np.flatnonzero(edges == -1)
        for s, e in zip(starts, ends):
            if e - s < min_len:
                out[s:e, c] = False
    return out


class Sparsified(NamedTuple):
    mask: np.ndarray
    series: np.ndarray
    keep_ratio: float


def _onehot(index: int, n: int) -> np.ndarray:
    v = np.zeros(n, dtype=np.uint8)
    v[index] = 1
    return v


def sparsify(query, donor, model, target, config: SparsifyConfig | None = None,
             query_peaks=None, strict: bool = True) -> Sparsified:
    """Transplant the highest-scoring donor coordinates into the query.

    Keep ratios are tried in increasing order and the first candidate whose
    thresholded prediction equals ``target`` is returned. With ``strict=False``
    the donor need not be classified as the target, and when no ratio works
    the last candidate is returned instead of raising.
    """
    config = config or SparsifyConfig()
    q, d = as_array(query), as_array(donor)
    target = np.asarray(target, dtype=np.uint8)
    if q.shape != d.shape:
        raise ValueError(f"query {q.shape} and donor {d.shape} differ in shape")
    if strict and not np.array_equal(model.predict_labels(d), target):
        raise SparsifyError("donor is not classified as the target")
    if np.array_equal(model.predict_labels(q), target):
        raise ValueError("query already has the target prediction")
    if query_peaks is None:
        query_peaks = detect_rpeaks(q, choose_lead(q))

    scores = importance_scores(q, d, query_peaks, config).ravel()
    order = np.argsort(-scores, kind="stable")
    n = scores.size
    masks, cands, ratios = [], [], config.schedule()
    for r in ratios:
        k = n if r >= 1.0 else int(round(r * n))
        flat = np.zeros(n, dtype=bool)
        flat[order[:k]] = True
        m = clean_segments(flat.reshape(q.shape), config.min_segment_len)
        masks.append(m)
        cands.append(np.where(m, d, q))
    labels = predict_labels(model.predict_proba_batch(np.stack(cands)), model.thresholds)
    for m, c, r, lab in zip(masks, cands, ratios, labels):
        if np.array_equal(lab, target):
            return Sparsified(m, c, r)
    if not strict:
        return Sparsified(masks[-1], cands[-1], ratios[-1])
    raise SparsifyError(f"no keep ratio up to {config.max_keep_ratio} reached the target")


def select_target_class(probs, predicted, class_names, normal: str = NORMAL_CLASS) -> int:
    probs = np.asarray(probs, dtype=np.float64)
    predicted = np.asarray(predicted).astype(bool)
    free = np.flatnonzero(~predicted)
    if free.size == 0:
        raise NoTargetError("every class is already predicted; no counterfactual target")
    names = list(class_names)
    if normal in names:
        ni = names.index(normal)
        pathological = np.delete(predicted, ni)
        if not predicted[ni] and pathological.any():
            return ni
    return int(free[np.argmax(probs[free])])


def retrieve_prototype(db, query, target: int, band: int | None = None):
    cands = db.for_class(target)
    if not cands:
        raise PrototypeError(f"no prototypes for class {db.class_names[target]!r}")
    q = as_array(query)
    dists = [dtw_distance(q, e.series, band) for e in cands]
    return cands[int(np.argmin(dists))]


@dataclass
class ExplainOptions:
    target: int | None = None
    band: int | None = None  # None: T // 10; negative: unbanded
    sparsify: SparsifyConfig = field(default_factory=SparsifyConfig)
    lead: int | None = None


@dataclass
class Variant:
    name: str
    series: np.ndarray
    mask: np.ndarray
    probs: np.ndarray
    labels: np.ndarray
    valid: bool
    keep_ratio: float

    @property
    def mask_fraction(self) -> float:
        return float(self.mask.mean())


@dataclass
class CounterfactualResult:
    query_id: str
    class_names: list[str]
    query_probs: np.ndarray
    query_labels: np.ndarray
    target_class: int
    prototype_id: str
    variants: list[Variant]
    aligned_valid: bool | None
    flags: list[str] = field(default_factory=list)

    def variant(self, name: str) -> Variant | None:
        return next((v for v in self.variants if v.name == name), None)

    @property
    def target_vector(self) -> np.ndarray:
        return _onehot(self.target_class, len(self.class_names))

    @property
    def initial_class(self) -> str:
        names = [self.class_names[i] for i in np.flatnonzero(self.query_labels)]
        return "+".join(names) if names else "none"


def _variant(name, series, mask, model, target_vec, keep_ratio):
    probs = model.predict_proba(series)
    labels = predict_labels(probs, model.thresholds)
    return Variant(name, np.asarray(series), np.asarray(mask, dtype=bool), probs, labels,
                   bool(np.array_equal(labels, target_vec)), keep_ratio)


def explain(query, model, db, options: ExplainOptions | None = None, query_id: str | None = None
            ) -> CounterfactualResult:
    options = options or ExplainOptions()
    q = as_array(query)
    if query_id is None:
        query_id = getattr(query, "record_id", "") or "query"
    L = model.n_classes
    probs = model.predict_proba(q)
    pred = predict_labels(probs, model.thresholds)
    if options.target is None:
        target = select_target_class(probs, pred, model.class_names)
    else:
        target = int(options.target)
        if not 0 <= target < L:
            raise NoTargetError(f"target index {target} out of range")
        if np.array_equal(_onehot(target, L), pred):
            raise NoTargetError(
                f"target {model.class_names[target]!r} equals the current prediction; "
                "pick another class or omit the target")
    target_vec = _onehot(target, L)
    band = default_band(q.shape[0]) if options.band is None else (
        None if options.band < 0 else options.band)

    entry = retrieve_prototype(db, q, target, band)
    donor = np.asarray(entry.series, dtype=np.float64)
    cfg = options.sparsify
    flags = []

    lead = choose_lead(q) if options.lead is None else options.lead
    q_peaks = detect_rpeaks(q, lead)
    if q_peaks.size == 0:
        flags.append("no_query_rpeaks")

    variants = [_variant("Original", donor, np.ones(q.shape, bool), model, target_vec, 1.0)]
    sp = sparsify(q, donor, model, target_vec, cfg, q_peaks)
    variants.append(_variant("Sparse", sp.series, sp.mask, model, target_vec, sp.keep_ratio))

    aligned_valid = None
    try:
        aligned = align_prototype(donor, q, lead=lead)
    except AlignmentUnavailable as exc:
        flags.append("alignment_unavailable")
        log.info("alignment unavailable for %s: %s", query_id, exc)
    else:
        if detect_rpeaks(donor, lead).size < q_peaks.size:
            # fewer donor beats: zeros were prepended before warping
            flags.append("prototype_zero_padded")
        if not np.array_equal(model.predict_labels(aligned), target_vec):
            flags.append("aligned_donor_not_target")
        # the aligned donor may miss the target; report rather than fail
        asp = sparsify(q, aligned, model, target_vec, cfg, q_peaks, strict=False)
        v = _variant("Aligned Sparse", asp.series, asp.mask, model, target_vec, asp.keep_ratio)
        variants.append(v)
        aligned_valid = v.valid

    return CounterfactualResult(query_id, list(model.class_names), probs, pred, target,
                                entry.record_id, variants, aligned_valid, flags)


def mask_to_rle(mask: np.ndarray) -> list[list[list[int]]]:
    """Per channel, ``[start, length]`` runs of ones."""
    out = []
    for c in range(mask.shape[1]):
        col = np.concatenate([[0], mask[:, c].astype(np.int8), [0]])
        e = np.diff(col)
        out.append([[int(s), int(t - s)] for s, t in zip(np.flatnonzero(e == 1),
                                                          np.flatnonzero(e == -1))])
    return out


def rle_to_mask(rle, n_timesteps: int) -> np.ndarray:
    m = np.zeros((n_timesteps, len(rle)), dtype=bool)
    for c, runs in enumerate(rle):
        for s, n in runs:
            m[s:s + n, c] = True
    return m


def result_to_dict(res: CounterfactualResult) -> dict:
    T, C = res.variants[0].series.shape
    return {
        "query_id": res.query_id,
        "class_names": res.class_names,
        "initial_class": res.initial_class,
        "query_probs": [float(p) for p in res.query_probs],
        "query_labels": [int(b) for b in res.query_labels],
        "target_class": res.class_names[res.target_class],
        "target_index": res.target_class,
        "prototype_id": res.prototype_id,
        "n_timesteps": T,
        "n_channels": C,
        "aligned_valid": res.aligned_valid,
        "flags": res.flags,
        "variants": [
            {
                "name": v.name,
                "probs": [float(p) for p in v.probs],
                "labels": [int(b) for b in v.labels],
                "mask_fraction": v.mask_fraction,
                "keep_ratio": v.keep_ratio,
                "valid": v.valid,
                "mask_rle": mask_to_rle(v.mask),
            }
            for v in res.variants
        ],
    }


def save_result(res: CounterfactualResult, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(out_dir / "cf_signals.f32",
                       to_f32_bytes(np.stack([v.series for v in res.variants])))
    atomic_write_text(out_dir / "result.json", json.dumps(result_to_dict(res), indent=2) + "\n")
    return out_dir / "result.json"


def load_result(path) -> CounterfactualResult:
    path = Path(path)
    json_path = path / "result.json" if path.is_dir() else path
    with open(json_path) as fh:
        doc = json.load(fh)
    T, C = doc["n_timesteps"], doc["n_channels"]
    sig = read_f32(json_path.parent / "cf_signals.f32", (len(doc["variants"]), T, C))
    variants = [
        Variant(v["name"], sig[i], rle_to_mask(v["mask_rle"], T), np.array(v["probs"]),
                np.array(v["labels"], dtype=np.uint8), v["valid"], v["keep_ratio"])
        for i, v in enumerate(doc["variants"])
    ]
    return CounterfactualResult(doc["query_id"], doc["class_names"], np.array(doc["query_probs"]),
                                np.array(doc["query_labels"], dtype=np.uint8),
                                doc["target_index"], doc["prototype_id"], variants,
                                doc["aligned_valid"], doc.get("flags", []))
