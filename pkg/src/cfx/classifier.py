"""Multi-label classifiers, decision thresholds and the external-model adapter."""

from __future__ import annotations

import base64
import json
import logging
import shlex
import subprocess
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, as_array, atomic_write_text
from .errors import AdapterError, DegenerateDatasetError, ShapeError

log = logging.getLogger(__name__)

THRESHOLD_GRID = np.round(np.arange(1001) * 0.001, 3)

# Appendix-style thresholds of the deep PTB-XL model, for reference only.
PTBXL_THRESHOLDS = {"NORM": 0.307, "MI": 0.316, "CD": 0.336, "STTC": 0.352, "HYP": 0.446}


class Model:
    """Deterministic multi-label probabilistic classifier.

    Subclasses implement ``_proba_batch`` on an ``(N, T, C)`` array.
    """

    kind = "abstract"

    def __init__(self, class_names, thresholds, n_timesteps, n_channels):
        self.class_names = list(class_names)
        t = np.asarray(thresholds, dtype=np.float64)
        if t.shape != (len(self.class_names),):
            raise ShapeError("one threshold per class required")
        if np.any((t <= 0) | (t >= 1)):
            raise ValueError("thresholds must lie in (0, 1)")
        self.thresholds = t
        self.n_timesteps = int(n_timesteps)
        self.n_channels = int(n_channels)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def _check(self, X: np.ndarray) -> None:
        if X.shape[1:] != (self.n_timesteps, self.n_channels):
            raise ShapeError(
                f"model expects (T, C)=({self.n_timesteps}, {self.n_channels}), "
                f"got {X.shape[1:]}"
            )

    def predict_proba_batch(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            X = X[..., None]
        self._check(X)
        return np.asarray(self._proba_batch(X), dtype=np.float64)

    def predict_proba(self, series) -> np.ndarray:
        return self.predict_proba_batch(as_array(series)[None])[0]

    def predict_labels(self, series) -> np.ndarray:
        return predict_labels(self.predict_proba(series), self.thresholds)

    def predict_labels_batch(self, X) -> np.ndarray:
        return predict_labels(self.predict_proba_batch(X), self.thresholds)

    def _proba_batch(self, X):
        raise NotImplementedError


def predict_proba(model: Model, series) -> np.ndarray:
    return model.predict_proba(series)


def predict_labels(probs, thresholds) -> np.ndarray:
    """Positive iff the probability is strictly above the class threshold."""
    p = np.asarray(probs, dtype=np.float64)
    t = np.asarray(thresholds, dtype=np.float64)
    if p.shape[-1] != t.shape[-1]:
        raise ShapeError(f"{p.shape[-1]} probabilities vs {t.shape[-1]} thresholds")
    return (p > t).astype(np.uint8)


def _f1_curve(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    pred = p[None, :] >= THRESHOLD_GRID[:, None]
    tp = np.sum(pred & y[None, :], axis=1)
    fp = np.sum(pred & ~y[None, :], axis=1)
    fn = np.sum(~pred & y[None, :], axis=1)
    denom = 2 * tp + fp + fn
    return np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)


def select_thresholds(probs, labels) -> tuple[np.ndarray, list[int]]:
    """Per-class F1-maximizing threshold on the 0.001 grid.

    Returns ``(thresholds, fallback_classes)``; classes without a positive
    example get 0.5 and are listed in ``fallback_classes``.
    """
    P = np.asarray(probs, dtype=np.float64)
    Y = np.asarray(labels).astype(bool)
    if P.ndim != 2 or P.shape != Y.shape or P.shape[0] == 0:
        raise ShapeError("probs and labels must be aligned, non-empty (N, L) arrays")
    out = np.empty(P.shape[1])
    flagged = []
    for j in range(P.shape[1]):
        if not Y[:, j].any():
            out[j] = 0.5
            flagged.append(j)
            log.warning("class %d has no positive labels; threshold falls back to 0.5", j)
            continue
        f1 = _f1_curve(P[:, j], Y[:, j])
        best = int(np.flatnonzero(f1 == f1.max())[0])
        out[j] = THRESHOLD_GRID[best]
    # keep the (0, 1) invariant at the grid ends
    return np.clip(out, 0.001, 0.999), flagged


def summary_features(X: np.ndarray) -> np.ndarray:
    """Per-channel mean, std, min, max, mean |diff| and max |diff|."""
    X = np.asarray(X, dtype=np.float64)
    d = np.abs(np.diff(X, axis=1))
    feats = [X.mean(1), X.std(1), X.min(1), X.max(1), d.mean(1), d.max(1)]
    return np.concatenate(feats, axis=1)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class ReferenceConfig:
    seed: int = 0
    l2: float = 1.0
    max_iter: int = 2000


class ReferenceModel(Model):
    """Logistic regression per class over fixed summary features."""

    kind = "reference"

    def __init__(self, class_names, thresholds, n_timesteps, n_channels,
                 feat_mean, feat_scale, coef, intercept, seed=0):
        super().__init__(class_names, thresholds, n_timesteps, n_channels)
        self.feat_mean = np.asarray(feat_mean, dtype=np.float64)
        self.feat_scale = np.asarray(feat_scale, dtype=np.float64)
        self.coef = np.asarray(coef, dtype=np.float64)
        self.intercept = np.asarray(intercept, dtype=np.float64)
        self.seed = int(seed)

    def _proba_batch(self, X):
        F = (summary_features(X) - self.feat_mean) / self.feat_scale
        return _sigmoid(F @ self.coef.T + self.intercept)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "class_names": self.class_names,
            "thresholds": self.thresholds.tolist(),
            "n_timesteps": self.n_timesteps,
            "n_channels": self.n_channels,
            "feat_mean": self.feat_mean.tolist(),
            "feat_scale": self.feat_scale.tolist(),
            "coef": self.coef.tolist(),
            "intercept": self.intercept.tolist(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReferenceModel":
        return cls(d["class_names"], d["thresholds"], d["n_timesteps"], d["n_channels"],
                   d["feat_mean"], d["feat_scale"], d["coef"], d["intercept"], d.get("seed", 0))


def fit_reference_classifier(dataset: Dataset, config: ReferenceConfig | None = None) -> ReferenceModel:
    from sklearn.linear_model import LogisticRegression

    config = config or ReferenceConfig()
    if len(dataset) == 0:
        raise DegenerateDatasetError("empty dataset")
    Y = dataset.labels.astype(bool)
    missing = [dataset.class_names[j] for j in range(Y.shape[1]) if not Y[:, j].any()]
    if missing:
        raise DegenerateDatasetError(f"classes without positive examples: {missing}")
    if Y.all(axis=0).any():
        raise DegenerateDatasetError("a class is positive on every record")

    F = summary_features(dataset.signals)
    mean = F.mean(0)
    scale = F.std(0)
    scale[scale < 1e-12] = 1.0
    Z = (F - mean) / scale
    coef, intercept = [], []
    for j in range(Y.shape[1]):
        lr = LogisticRegression(C=1.0 / config.l2, max_iter=config.max_iter,
                                random_state=config.seed)
        lr.fit(Z, Y[:, j].astype(int))
        coef.append(lr.coef_[0])
        intercept.append(lr.intercept_[0])
    model = ReferenceModel(dataset.class_names, np.full(Y.shape[1], 0.5),
                           dataset.n_timesteps, dataset.n_channels,
                           mean, scale, np.array(coef), np.array(intercept), config.seed)
    thresholds, _ = select_thresholds(model.predict_proba_batch(dataset.signals), dataset.labels)
    model.thresholds = thresholds
    return model


class CallableModel(Model):
    """Wrap ``fn(X: (N, T, C)) -> (N, L)`` probabilities as a Model."""

    kind = "callable"

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], class_names,
                 n_timesteps, n_channels, thresholds=None):
        if thresholds is None:
            thresholds = np.full(len(class_names), 0.5)
        super().__init__(class_names, thresholds, n_timesteps, n_channels)
        self.fn = fn

    def _proba_batch(self, X):
        return self.fn(X)


class ConstantModel(CallableModel):
    kind = "constant"

    def __init__(self, probs: Sequence[float], class_names, n_timesteps, n_channels,
                 thresholds=None):
        p = np.asarray(probs, dtype=np.float64)
        super().__init__(lambda X: np.tile(p, (X.shape[0], 1)), class_names,
                         n_timesteps, n_channels, thresholds)


class ExternalModel(Model):
    """Child process speaking line-delimited JSON on stdin/stdout.

    At most one request is in flight; concurrent callers queue on a lock.
    """

    kind = "external"

    def __init__(self, command, thresholds=None, timeout: float | None = None):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        self.command = argv
        self._lock = threading.Lock()
        try:
            self._proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                          text=True, bufsize=1)
        except OSError as exc:
            raise AdapterError(f"cannot start adapter {argv!r}: {exc}") from exc
        hello = self._request({"op": "hello"})
        try:
            classes, T, C = hello["classes"], hello["T"], hello["C"]
        except KeyError as exc:
            self.close()
            raise AdapterError(f"bad handshake response: {hello}") from exc
        if thresholds is None:
            thresholds = hello.get("thresholds", [0.5] * len(classes))
        super().__init__(classes, thresholds, T, C)

    def _request(self, msg: dict) -> dict:
        with self._lock:
            if self._proc.poll() is not None:
                raise AdapterError(f"adapter exited with code {self._proc.returncode}")
            try:
                self._proc.stdin.write(json.dumps(msg) + "\n")
                self._proc.stdin.flush()
                line = self._proc.stdout.readline()
            except (BrokenPipeError, OSError) as exc:
                raise AdapterError(f"adapter transport failure: {exc}") from exc
        if not line:
            raise AdapterError("adapter closed its output")
        try:
            resp = json.loads(line)
        except json.JSONDecodeError as exc:
            raise AdapterError(f"adapter sent invalid JSON: {line!r}") from exc
        if "error" in resp:
            raise AdapterError(f"adapter error: {resp['error']}")
        return resp

    def _proba_batch(self, X):
        out = []
        for x in X:
            payload = base64.b64encode(np.ascontiguousarray(x, dtype="<f4").tobytes())
            resp = self._request({"op": "predict", "T": x.shape[0], "C": x.shape[1],
                                  "series_b64": payload.decode("ascii")})
            probs = np.asarray(resp.get("probs"), dtype=np.float64)
            if probs.shape != (self.n_classes,):
                raise AdapterError(f"adapter returned {probs.shape} probabilities")
            out.append(probs)
        return np.array(out)

    def close(self):
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def decode_series(msg: dict) -> np.ndarray:
    """Inverse of the adapter's ``series_b64`` encoding; handy for adapter authors."""
    raw = base64.b64decode(msg["series_b64"])
    return np.frombuffer(raw, dtype="<f4").reshape(int(msg["T"]), int(msg["C"])).astype(np.float64)


def save_model(model: ReferenceModel, path) -> None:
    atomic_write_text(path, json.dumps(model.to_dict(), indent=1) + "\n")


def load_model(path) -> ReferenceModel:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"model file not found: {path}")
    with open(path) as fh:
        d = json.load(fh)
    if d.get("kind") != "reference":
        raise ValueError(f"unsupported model kind {d.get('kind')!r}")
    return ReferenceModel.from_dict(d)
