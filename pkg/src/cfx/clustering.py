"""Distance-matrix embedding (metric MDS), k-means and silhouette model selection."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class DistanceMatrix:
    d: np.ndarray
    ids: list[str]

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=np.float64)
        n = len(self.ids)
        if self.d.shape != (n, n):
            raise ValueError(f"matrix shape {self.d.shape} does not match {n} ids")
        if not np.all(np.isfinite(self.d)):
            raise ValueError("distance matrix has non-finite entries")
        if np.any(self.d < 0):
            raise ValueError("distance matrix has negative entries")
        if not np.allclose(self.d, self.d.T, rtol=0, atol=1e-12):
            raise ValueError("distance matrix is not symmetric")
        if np.any(np.diag(self.d) != 0):
            raise ValueError("distance matrix has a nonzero diagonal")

    def __len__(self):
        return len(self.ids)


@dataclass
class Embedding:
    z: np.ndarray
    stress: float
    n_iter: int
    stress_history: list[float] = field(default_factory=list)

    @property
    def dims(self) -> int:
        return self.z.shape[1]


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    k: int
    centroids: np.ndarray
    inertia: float = 0.0


def _pdist(z: np.ndarray) -> np.ndarray:
    # explicit differences: coincident points get exactly zero
    diff = z[:, None, :] - z[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def raw_stress(z: np.ndarray, D: np.ndarray) -> float:
    iu = np.triu_indices(D.shape[0], 1)
    return float(np.sum((_pdist(z)[iu] - D[iu]) ** 2))


def classical_scaling(D: np.ndarray, dims: int) -> np.ndarray:
    """Torgerson scaling; eigenvector signs fixed so the largest entry is positive."""
    n = D.shape[0]
    J = np.eye(n) - 1.0 / n
    B = -0.5 * J @ (D ** 2) @ J
    w, v = np.linalg.eigh(B)
    order = np.argsort(w)[::-1][:dims]
    w, v = w[order], v[:, order]
    for c in range(v.shape[1]):
        if v[np.argmax(np.abs(v[:, c])), c] < 0:
            v[:, c] = -v[:, c]
    z = v * np.sqrt(np.clip(w, 0.0, None))
    if z.shape[1] < dims:
        z = np.hstack([z, np.zeros((n, dims - z.shape[1]))])
    return z


def mds_embed(matrix, dims: int, max_iter: int = 300, rel_tol: float = 1e-6,
              seed: int = 0) -> Embedding:
    """Metric MDS by stress majorization (SMACOF) from a classical-scaling start.

    ``seed`` only matters when classical scaling yields a degenerate start.
    """
    D = np.asarray(getattr(matrix, "d", matrix), dtype=np.float64)
    if dims < 1:
        raise ValueError("dims must be >= 1")
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ValueError("distance matrix must be square")
    if np.any(D < 0) or not np.allclose(D, D.T, rtol=0, atol=1e-12):
        raise ValueError("distance matrix must be symmetric and non-negative")
    n = D.shape[0]

    z = classical_scaling(D, dims)
    if not np.any(z) and np.any(D):
        z = np.random.default_rng(seed).standard_normal((n, dims))
    stress = raw_stress(z, D)
    history = [stress]
    it = 0
    for it in range(1, max_iter + 1):
        if stress == 0.0:
            it -= 1
            break
        dz = _pdist(z)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(dz > 0, D / dz, 0.0)
        Bm = -ratio
        np.fill_diagonal(Bm, 0.0)
        np.fill_diagonal(Bm, -Bm.sum(axis=1))
        z_new = Bm @ z / n
        new = raw_stress(z_new, D)
        if new > stress:
            # numerical noise only; majorization never increases stress
            break
        z, old, stress = z_new, stress, new
        history.append(stress)
        if old > 0 and (old - stress) / old < rel_tol:
            break
    return Embedding(z, stress, it, history)


def silhouette(z, labels) -> float:
    """Mean silhouette; singleton clusters and zero-spread points score 0."""
    z = np.asarray(getattr(z, "z", z), dtype=np.float64)
    labels = np.asarray(getattr(labels, "labels", labels))
    ks = np.unique(labels)
    if len(ks) < 2:
        raise ValueError("silhouette needs at least two clusters")
    dist = _pdist(z)
    n = len(labels)
    s = np.zeros(n)
    masks = {k: labels == k for k in ks}
    sizes = {k: int(m.sum()) for k, m in masks.items()}
    for i in range(n):
        own = labels[i]
        if sizes[own] == 1:
            continue
        a = dist[i, masks[own]].sum() / (sizes[own] - 1)
        b = min(dist[i, masks[k]].mean() for k in ks if k != own)
        m = max(a, b)
        s[i] = 0.0 if m == 0 else (b - a) / m
    return float(s.mean())


def kmeans(z: np.ndarray, k: int, seed: int = 0, n_init: int = 20) -> ClusterAssignment:
    from sklearn.cluster import KMeans

    km = KMeans(n_clusters=k, n_init=n_init, random_state=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        raw = km.fit_predict(z)
    # relabel clusters by order of first appearance
    order = {}
    for lab in raw:
        order.setdefault(int(lab), len(order))
    labels = np.array([order[int(l)] for l in raw])
    centroids = np.zeros((len(order), z.shape[1]))
    for old, new in order.items():
        centroids[new] = km.cluster_centers_[old]
    return ClusterAssignment(labels, len(order), centroids, float(km.inertia_))


@dataclass
class StructureChoice:
    dims: int
    k: int
    embedding: Embedding
    assignment: ClusterAssignment
    silhouette: float
    k_truncated: bool = False


def select_structure(matrix, dim_range=range(2, 9), k_range=range(2, 11), seed: int = 0,
                     n_init: int = 20) -> StructureChoice:
    D = np.asarray(getattr(matrix, "d", matrix), dtype=np.float64)
    n = D.shape[0]
    if n < 3:
        raise ValueError("structure selection needs at least 3 records")
    ks = [k for k in k_range if 2 <= k <= n - 1]
    truncated = len(ks) < len([k for k in k_range if k >= 2])
    if truncated:
        log.warning("k range truncated to %s for %d records", ks, n)
    if not ks:
        raise ValueError("empty k range")

    best = None
    for dims in dim_range:
        emb = mds_embed(D, dims, seed=seed)
        n_distinct = len(np.unique(np.round(emb.z, 12), axis=0))
        for k in ks:
            if k > n_distinct:
                continue
            assign = kmeans(emb.z, k, seed=seed, n_init=n_init)
            if assign.k < 2:
                continue
            s = silhouette(emb.z, assign.labels)
            if best is None or s > best.silhouette:
                best = StructureChoice(dims, k, emb, assign, s, truncated)
    if best is None:
        # every point coincides; one trivial split
        emb = mds_embed(D, min(dim_range), seed=seed)
        labels = np.zeros(n, dtype=int)
        labels[1:] = 1
        cents = np.stack([emb.z[:1].mean(0), emb.z[1:].mean(0)])
        best = StructureChoice(emb.dims, 2, emb, ClusterAssignment(labels, 2, cents), 0.0, truncated)
    return best


def medoid(member_ids, matrix: DistanceMatrix):
    """Member with the smallest summed distance to the others; lowest index wins ties."""
    index = {rid: i for i, rid in enumerate(matrix.ids)}
    try:
        idx = sorted(index[m] for m in member_ids)
    except KeyError as exc:
        raise KeyError(f"record {exc.args[0]!r} not in distance matrix") from None
    if not idx:
        raise ValueError("empty cluster")
    sums = matrix.d[np.ix_(idx, idx)].sum(axis=1)
    return matrix.ids[idx[int(np.argmin(sums))]]
