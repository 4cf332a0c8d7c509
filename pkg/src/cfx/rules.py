"""Attribution tensors and their conversion into instance-specific interval rules.

Features are ``(time, channel)`` coordinates. A rule is a conjunction of
half-open conditions ``low < x[t, c] <= high``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, as_array, atomic_write_bytes, atomic_write_text, read_f32, to_f32_bytes
from .errors import DataFormatError, EmptyRuleError, ShapeError

log = logging.getLogger(__name__)


@dataclass
class AttributionTensor:
    values: np.ndarray  # (N, L, T, C)
    provenance: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 4:
            raise ShapeError("attributions must be (N, L, T, C)")
        if not np.all(np.isfinite(self.values)):
            raise DataFormatError("attributions contain non-finite values")

    def check_against(self, dataset: Dataset) -> None:
        n, l, t, c = self.values.shape
        want = (len(dataset), len(dataset.class_names), dataset.n_timesteps, dataset.n_channels)
        if (n, l, t, c) != want:
            raise ShapeError(f"attribution shape {(n, l, t, c)} does not match dataset {want}")


def load_attributions(path) -> AttributionTensor:
    """Read ``attr.f32``; the manifest is ``attr_manifest.json`` next to it."""
    path = Path(path)
    f32 = path / "attr.f32" if path.is_dir() else path
    man_path = f32.parent / "attr_manifest.json"
    if not f32.is_file() or not man_path.is_file():
        raise DataFormatError(f"missing attr.f32 or attr_manifest.json near {path}")
    with open(man_path) as fh:
        man = json.load(fh)
    shape = tuple(int(man[k]) for k in ("n_records", "n_classes", "n_timesteps", "n_channels"))
    return AttributionTensor(read_f32(f32, shape), str(man.get("provenance", "")))


def save_attributions(attr: AttributionTensor, directory) -> None:
    directory = Path(directory)
    n, l, t, c = attr.values.shape
    man = {"n_records": n, "n_classes": l, "n_timesteps": t, "n_channels": c,
           "provenance": attr.provenance}
    atomic_write_bytes(directory / "attr.f32", to_f32_bytes(attr.values))
    atomic_write_text(directory / "attr_manifest.json", json.dumps(man, indent=2) + "\n")


@dataclass
class RuleConfig:
    percentile: float = 90.0
    n_perturb: int = 1000
    perturb_scale: float = 1.0
    perturb_kind: str = "uniform"
    verify_rounds: int = 12

    def __post_init__(self):
        if not 0 < self.percentile < 100:
            raise ValueError("percentile must be in (0, 100)")
        if self.n_perturb < 1:
            raise ValueError("n_perturb must be positive")
        if self.perturb_kind not in ("uniform", "gaussian"):
            raise ValueError("perturb_kind must be 'uniform' or 'gaussian'")


@dataclass
class IntervalRule:
    record_id: str
    class_index: int
    conjuncts: list[tuple[int, int, float, float]]
    prediction: list[int]
    coverage: float = 0.0
    confidence: float = 0.0
    flags: list[str] = field(default_factory=list)

    def satisfied_by(self, X) -> np.ndarray:
        """Boolean per record of ``X`` (N, T, C), or a scalar for one series."""
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 2
        if single:
            X = X[None]
        if not self.conjuncts:
            ok = np.ones(X.shape[0], dtype=bool)
        else:
            t, c, lo, hi = (np.array(a) for a in zip(*self.conjuncts))
            v = X[:, t.astype(int), c.astype(int)]
            ok = np.all((v > lo) & (v <= hi), axis=1)
        return ok[0] if single else ok

    def to_json(self) -> str:
        return json.dumps({
            "record_id": self.record_id,
            "class_index": self.class_index,
            "prediction": self.prediction,
            "coverage": self.coverage,
            "confidence": self.confidence,
            "flags": self.flags,
            "conjuncts": [{"time": int(t), "channel": int(c), "low": float(lo), "high": float(hi)}
                          for t, c, lo, hi in self.conjuncts],
        })

    @classmethod
    def from_json(cls, line: str) -> "IntervalRule":
        d = json.loads(line)
        conj = [(c["time"], c["channel"], c["low"], c["high"]) for c in d["conjuncts"]]
        return cls(d["record_id"], d["class_index"], conj, d["prediction"], d["coverage"],
                   d["confidence"], d.get("flags", []))


def global_threshold(attr, percentile: float = 90.0) -> float:
    """Linear-interpolation percentile of all absolute attribution values."""
    vals = np.abs(np.asarray(getattr(attr, "values", attr), dtype=np.float64)).ravel()
    if vals.size == 0:
        raise ValueError("empty attribution tensor")
    return float(np.percentile(vals, percentile, method="linear"))


def important_features(attr_slice, threshold: float) -> np.ndarray:
    """``(K, 2)`` array of (time, channel) with ``|value| >= threshold``, row-major order."""
    a = np.abs(np.asarray(attr_slice, dtype=np.float64))
    if a.ndim == 1:
        a = a[:, None]
    return np.argwhere(a >= threshold)


def feature_sigma(dataset) -> np.ndarray:
    """Per-coordinate standard deviation over the records, shape (T, C)."""
    X = np.asarray(getattr(dataset, "signals", dataset), dtype=np.float64)
    return X.std(axis=0)


def _draw(rng, x, half, m, kind):
    if kind == "uniform":
        return x + half * rng.uniform(-1.0, 1.0, size=(m, x.size))
    return x + half * rng.standard_normal(size=(m, x.size))


def _labels_with(model, base, feats, values):
    X = np.repeat(base[None], values.shape[0], axis=0)
    X[:, feats[:, 0], feats[:, 1]] = values
    return model.predict_labels_batch(X)


def stable_intervals(model, series, features, sigma_f, config: RuleConfig | None = None,
                     seed: int = 0, reference=None):
    """Per-feature intervals ``(low, high]`` preserving the full label vector.

    The hull of the label-preserving joint perturbations is taken first; the
    box is then checked by uniform sampling inside it and shrunk toward the
    original values until a full sample of draws preserves the labels.
    Returns ``(conjuncts, flags)``.
    """
    config = config or RuleConfig()
    base = as_array(series)
    feats = np.asarray(features, dtype=np.int64).reshape(-1, 2)
    if feats.shape[0] == 0:
        raise ValueError("no features to perturb")
    sigma = np.asarray(sigma_f, dtype=np.float64)
    x = base[feats[:, 0], feats[:, 1]]
    half = config.perturb_scale * (sigma[feats[:, 0], feats[:, 1]] if sigma.ndim == 2 else sigma)
    ref = model.predict_labels(base) if reference is None else np.asarray(reference)
    rng = np.random.default_rng(seed)
    flags = []

    draws = _draw(rng, x, half, config.n_perturb, config.perturb_kind)
    keep = np.all(_labels_with(model, base, feats, draws) == ref, axis=1)
    if not keep.any():
        flags.append("no_preserving_draw")
        lo, hi = x.copy(), x.copy()
    else:
        lo = np.minimum(draws[keep].min(axis=0), x)
        hi = np.maximum(draws[keep].max(axis=0), x)

    for _ in range(config.verify_rounds):
        if np.all(hi == lo):
            break
        probe = lo + (hi - lo) * rng.uniform(0.0, 1.0, size=(config.n_perturb, x.size))
        if np.all(_labels_with(model, base, feats, probe) == ref):
            break
        lo = x - 0.5 * (x - lo)
        hi = x + 0.5 * (hi - x)
    else:
        flags.append("collapsed_to_point")
        lo, hi = x.copy(), x.copy()

    low = np.nextafter(lo, -np.inf)
    conj = [(int(t), int(c), float(a), float(b))
            for (t, c), a, b in zip(feats, low, hi)]
    return conj, flags


def score_rule(rule: IntervalRule, dataset, model, predictions=None) -> tuple[float, float]:
    """Coverage over ``dataset`` and confidence among the covered records."""
    X = np.asarray(getattr(dataset, "signals", dataset), dtype=np.float64)
    sat = rule.satisfied_by(X)
    coverage = float(sat.mean()) if len(sat) else 0.0
    if not sat.any():
        return coverage, 0.0
    if predictions is None:
        preds = model.predict_labels_batch(X[sat])
    else:
        preds = np.asarray(predictions)[sat]
    match = np.all(preds == np.asarray(rule.prediction), axis=1)
    return coverage, float(match.mean())


def extract_rule(model, series, attr_slice, dataset, config: RuleConfig | None = None, *,
                 class_index: int, threshold: float | None = None, sigma_f=None,
                 seed: int = 0, record_id: str | None = None, predictions=None) -> IntervalRule:
    config = config or RuleConfig()
    x = as_array(series)
    pred = model.predict_labels(x)
    if not pred[class_index]:
        raise ValueError(f"class {class_index} is not predicted for this record")
    if threshold is None:
        threshold = global_threshold(attr_slice, config.percentile)
    feats = important_features(attr_slice, threshold)
    rid = record_id if record_id is not None else getattr(series, "record_id", "")
    if feats.shape[0] == 0:
        raise EmptyRuleError(f"no attribution of record {rid!r} reaches {threshold:g}")
    if sigma_f is None:
        sigma_f = feature_sigma(dataset)
    conj, flags = stable_intervals(model, x, feats, sigma_f, config, seed, reference=pred)
    rule = IntervalRule(rid, int(class_index), conj, [int(b) for b in pred], flags=flags)
    if dataset is not None:
        rule.coverage, rule.confidence = score_rule(rule, dataset, model, predictions)
        if rule.coverage == 0:
            rule.flags.append("zero_coverage")
    return rule


def occlusion_attribution(model, series, window: int) -> np.ndarray:
    """Probability drop when a ``window``-long span of one channel is set to its mean.

    The span is centred on ``t`` and shifted inward at the edges, so it always
    covers exactly ``window`` samples. Returns ``(L, T, C)``.
    """
    x = as_array(series)
    T, C = x.shape
    if not 1 <= window <= T:
        raise ValueError(f"window must be in [1, {T}]")
    base = model.predict_proba(x)
    starts = np.clip(np.arange(T) - window // 2, 0, T - window)
    uniq = np.unique(starts)
    out = np.empty((model.n_classes, T, C))
    for c in range(C):
        batch = np.repeat(x[None], len(uniq), axis=0)
        mean = x[:, c].mean()
        for b, s in enumerate(uniq):
            batch[b, s:s + window, c] = mean
        drop = base[None, :] - model.predict_proba_batch(batch)  # (U, L)
        lookup = np.searchsorted(uniq, starts)
        out[:, :, c] = drop[lookup].T
    return out


def write_rules(rules, path) -> None:
    atomic_write_text(path, "".join(r.to_json() + "\n" for r in rules))


def read_rules(path) -> list[IntervalRule]:
    with open(path) as fh:
        return [IntervalRule.from_json(line) for line in fh if line.strip()]
