"""Counterfactual quality metrics and report aggregation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .classifier import predict_labels
from .data import as_array, shift_series
from .dtw import default_band, dtw_distance

REPORT_COLUMNS = [
    "query_id", "initial_class", "target_class", "variant", "validity", "validity_multi",
    "sparsity_ratio", "l0", "l1", "l2", "noise_stability", "temporal_stability",
    "decision_margin", "q",
]
METRIC_COLUMNS = REPORT_COLUMNS[4:]


@dataclass
class NoiseLevels:
    fractions: tuple[float, ...] = (0.01, 0.02, 0.05)
    n_trials: int = 20


@dataclass
class ShiftSet:
    shifts: tuple[int, ...] = (-2, -1, 1, 2)


@dataclass
class QWeights:
    w_v: float = 0.25
    w_s: float = 0.25
    w_st: float = 0.25
    w_m: float = 0.25

    def __post_init__(self):
        w = (self.w_v, self.w_s, self.w_st, self.w_m)
        if min(w) < 0 or not any(w):
            raise ValueError("weights must be non-negative and not all zero")


def validity(model, x, x_cf, target) -> int:
    before = model.predict_labels(x)
    after = model.predict_labels(x_cf)
    target = np.asarray(target)
    return int(np.array_equal(after, target) and not np.array_equal(after, before))


def validity_multi(model, x_cf, target) -> int:
    return int(np.array_equal(model.predict_labels(x_cf), np.asarray(target)))


def sparsity_ratio(x, x_cf, sigma_train: float) -> float:
    tau = 0.01 * sigma_train
    return float(np.mean(np.abs(as_array(x_cf) - as_array(x)) > tau))


def lp_sparsity(x, x_cf) -> tuple[float, float, float]:
    d = as_array(x_cf) - as_array(x)
    return float(np.mean(d != 0)), float(np.abs(d).sum()), float(np.sqrt(np.sum(d * d)))


def noise_stability(model, x_cf, levels: NoiseLevels | None = None, seed: int = 0) -> float:
    levels = levels or NoiseLevels()
    x = as_array(x_cf)
    ref = model.predict_labels(x)
    std = x.std()
    rng = np.random.default_rng(seed)
    batch = []
    for frac in levels.fractions:
        for _ in range(levels.n_trials):
            batch.append(x + rng.normal(0.0, frac * std, size=x.shape))
    labels = predict_labels(model.predict_proba_batch(np.stack(batch)), model.thresholds)
    return float(np.mean(np.all(labels == ref, axis=1)))


def temporal_stability(x_cf, shifts: ShiftSet | None = None, band: int | None = None) -> float:
    shifts = shifts or ShiftSet()
    x = as_array(x_cf)
    norm = np.sqrt(x.size)
    mean = np.mean([dtw_distance(x, shift_series(x, s), band) / norm for s in shifts.shifts])
    return float(1.0 / (1.0 + mean))


def decision_margin(probs, thresholds, cls: int) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if not 0 <= cls < len(probs):
        raise IndexError(f"class index {cls} out of range")
    return float(probs[cls] - thresholds[cls])


@dataclass
class MetricsEntry:
    query_id: str
    initial_class: str
    target_class: str
    variant: str
    validity: int
    validity_multi: int
    sparsity_ratio: float
    l0: float
    l1: float
    l2: float
    noise_stability: float
    temporal_stability: float
    decision_margin: float
    q: float | None = None


def composite_quality(entry, weights: QWeights) -> float:
    get = entry.get if isinstance(entry, dict) else lambda k: getattr(entry, k)
    return (weights.w_v * get("validity")
            + weights.w_s * (1.0 - get("sparsity_ratio"))
            + weights.w_st * get("noise_stability")
            + weights.w_m * get("decision_margin"))


def evaluate_result(result, query, model, sigma_train: float, levels: NoiseLevels | None = None,
                    shifts: ShiftSet | None = None, band: int | None = None, seed: int = 0,
                    weights: QWeights | None = None) -> list[MetricsEntry]:
    """One MetricsEntry per variant of a CounterfactualResult."""
    x = as_array(query)
    target = result.target_vector
    if band is None and x.shape[0] > 256:
        band = default_band(x.shape[0])
    elif band is not None and band < 0:
        band = None
    tname = result.class_names[result.target_class]
    out = []
    for v in result.variants:
        cf = v.series
        l0, l1, l2 = lp_sparsity(x, cf)
        probs = model.predict_proba(cf)
        e = MetricsEntry(
            result.query_id, result.initial_class, tname, v.name,
            validity(model, x, cf, target), validity_multi(model, cf, target),
            sparsity_ratio(x, cf, sigma_train), l0, l1, l2,
            noise_stability(model, cf, levels, seed), temporal_stability(cf, shifts, band),
            decision_margin(probs, model.thresholds, result.target_class),
        )
        if weights is not None:
            e.q = composite_quality(e, weights)
        out.append(e)
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def entries_to_csv(entries) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for e in entries:
        d = asdict(e) if not isinstance(e, dict) else e
        w.writerow([_fmt(d[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


@dataclass
class AggregateRow:
    key: tuple
    n: int
    means: dict = field(default_factory=dict)


def aggregate_report(entries, group_by=("variant",)) -> list[AggregateRow]:
    """Mean of every metric within each group, groups in sorted key order."""
    entries = [asdict(e) if not isinstance(e, dict) else e for e in entries]
    if not entries:
        raise ValueError("no entries to aggregate")
    groups: dict[tuple, list[dict]] = {}
    for e in entries:
        groups.setdefault(tuple(e[g] for g in group_by), []).append(e)
    rows = []
    for key in sorted(groups):
        members = groups[key]
        means = {}
        for col in METRIC_COLUMNS:
            vals = [m[col] for m in members if m[col] is not None]
            # fsum keeps the mean independent of entry order
            means[col] = math.fsum(vals) / len(vals) if vals else None
        rows.append(AggregateRow(key, len(members), means))
    return rows


def aggregate_to_csv(rows: list[AggregateRow], group_by) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(group_by) + ["n"] + METRIC_COLUMNS)
    for r in rows:
        w.writerow(list(r.key) + [r.n] + [_fmt(r.means[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()
