"""Feature clustering into pseudo-labels.

Agglomerative (average linkage, Euclidean) is the primary method; k-means
and DBSCAN exist for the clustering-type ablation. All three return
``PseudoLabels`` that cover every sample with nonempty labels 0..k-1,
numbered by first appearance in the feature order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist, squareform
from sklearn.metrics import adjusted_rand_score

from .rng import make_rng


@dataclass(frozen=True)
class FeatureSet:
    ids: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2 or len(ids) != len(vectors):
            raise ValueError(f"FeatureSet: {len(ids)} ids vs vectors of shape {vectors.shape}")
        if len(set(ids.tolist())) != len(ids):
            raise ValueError("FeatureSet: duplicate ids")
        if not np.isfinite(vectors).all():
            raise ValueError("FeatureSet: non-finite feature values")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "vectors", vectors)

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class Merge:
    a: int
    b: int
    distance: float
    new_id: int


@dataclass
class Dendrogram:
    """n - 1 merges; leaves are 0..n-1, merge t creates cluster n + t."""

    n: int
    merges: list

    def cut(self, k: int) -> np.ndarray:
        """Labels for the partition left after the first n - k merges."""
        if not 1 <= k <= self.n:
            raise ValueError(f"cut: k={k} outside [1, {self.n}]")
        parent = list(range(self.n))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        owner = {i: i for i in range(self.n)}  # cluster id -> representative leaf
        for m in self.merges[: self.n - k]:
            ra, rb = find(owner[m.a]), find(owner[m.b])
            parent[max(ra, rb)] = min(ra, rb)
            owner[m.new_id] = min(ra, rb)
        return canonical_labels([find(i) for i in range(self.n)])


@dataclass
class PseudoLabels:
    ids: np.ndarray
    labels: np.ndarray
    method: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.ids) != len(self.labels):
            raise ValueError("PseudoLabels: ids and labels differ in length")
        if len(set(self.ids.tolist())) != len(self.ids):
            raise ValueError("PseudoLabels: duplicate ids")
        k = self.k
        if len(self.labels) and set(np.unique(self.labels).tolist()) != set(range(k)):
            raise ValueError("PseudoLabels: labels must be exactly 0..k-1, all nonempty")

    @property
    def k(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def as_dict(self) -> dict:
        return {int(i): int(c) for i, c in zip(self.ids, self.labels)}

    def sizes(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.k).tolist()

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "params": self.params,
            "k": self.k,
            "assignments": [[int(i), int(c)] for i, c in zip(self.ids, self.labels)],
        }

    @classmethod
    def from_json(cls, data: dict) -> "PseudoLabels":
        rows = data["assignments"]
        labels = cls([r[0] for r in rows], [r[1] for r in rows], data["method"], data.get("params", {}))
        if labels.k != data["k"]:
            raise ValueError(f"labels.json: k={data['k']} but assignments use {labels.k} clusters")
        return labels


def save_labels(path, labels: PseudoLabels) -> None:
    Path(path).write_text(json.dumps(labels.to_json(), indent=1))


def load_labels(path) -> PseudoLabels:
    return PseudoLabels.from_json(json.loads(Path(path).read_text()))


def canonical_labels(labels) -> np.ndarray:
    """Renumber labels 0..k-1 in order of first appearance."""
    seen: dict = {}
    return np.array([seen.setdefault(x, len(seen)) for x in np.asarray(labels).tolist()], dtype=np.int64)


def ari(a, b) -> float:
    return float(adjusted_rand_score(np.asarray(a), np.asarray(b)))


def _check(features: FeatureSet, k: int | None = None) -> None:
    if len(features) == 0:
        raise ValueError("empty FeatureSet")
    if k is not None and not 1 <= k <= len(features):
        raise ValueError(f"k={k} must be in [1, {len(features)}]")


# ---------------------------------------------------------------------------
# agglomerative


def build_dendrogram(features: FeatureSet) -> Dendrogram:
    """Average-linkage dendrogram, O(n^3) time and O(n^2) memory.

    Cluster distances are updated with the Lance-Williams rule. On equal
    linkage the pair with the lexicographically smallest (low id, high id)
    merges first.
    """
    _check(features)
    n = len(features)
    d = squareform(pdist(features.vectors)) if n > 1 else np.zeros((1, 1))
    np.fill_diagonal(d, np.inf)
    slot_id = np.arange(n)  # cluster id living in each slot
    size = np.ones(n)
    active = np.ones(n, dtype=bool)
    merges = []
    for t in range(n - 1):
        sub = d[np.ix_(active, active)]
        slots = np.flatnonzero(active)
        best = sub.min()
        ii, jj = np.nonzero(sub == best)
        keep = ii < jj
        ids_a, ids_b = slot_id[slots[ii[keep]]], slot_id[slots[jj[keep]]]
        lo, hi = np.minimum(ids_a, ids_b), np.maximum(ids_a, ids_b)
        pick = np.lexsort((hi, lo))[0]
        sa = slots[ii[keep][pick]]
        sb = slots[jj[keep][pick]]
        new_id = n + t
        merges.append(Merge(int(lo[pick]), int(hi[pick]), float(best), new_id))
        # merged cluster lives in slot sa
        row = (size[sa] * d[sa] + size[sb] * d[sb]) / (size[sa] + size[sb])
        d[sa, :] = row
        d[:, sa] = row
        d[sa, sa] = np.inf
        d[sb, :] = np.inf
        d[:, sb] = np.inf
        active[sb] = False
        size[sa] += size[sb]
        slot_id[sa] = new_id
    return Dendrogram(n, merges)


def agglomerative(features: FeatureSet, k: int, dendrogram: Dendrogram | None = None):
    _check(features, k)
    dendrogram = dendrogram or build_dendrogram(features)
    labels = dendrogram.cut(k)
    return PseudoLabels(features.ids, labels, "agglomerative", {"k": k, "linkage": "average"}), dendrogram


# ---------------------------------------------------------------------------
# k-means


def kmeans(features: FeatureSet, k: int, seed: int = 0, max_iters: int = 100) -> PseudoLabels:
    """k-means++ seeding then Lloyd iterations to an assignment fixpoint."""
    _check(features, k)
    x = features.vectors
    n = len(x)
    rng = make_rng(seed, "kmeans", k)
    centers = [x[int(rng.integers(n))]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    centers = np.array(centers)

    assign = None
    for _ in range(max_iters):
        dist = ((x[:, None, :] - centers[None]) ** 2).sum(axis=2)
        new = dist.argmin(axis=1)
        # repair empty clusters with the points farthest from their centre
        taken: set[int] = set()
        for c in range(k):
            if not np.any(new == c):
                own = dist[np.arange(n), new]
                for far in np.argsort(-own, kind="stable"):
                    if int(far) not in taken and np.sum(new == new[far]) > 1:
                        break
                taken.add(int(far))
                new[far] = c
                centers[c] = x[far]
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for c in range(k):
            centers[c] = x[assign == c].mean(axis=0)
    inertia = float(((x - centers[assign]) ** 2).sum())
    return PseudoLabels(features.ids, canonical_labels(assign), "kmeans",
                        {"k": k, "seed": seed, "inertia": inertia})


# ---------------------------------------------------------------------------
# DBSCAN


def dbscan(features: FeatureSet, eps: float, min_points: int = 4) -> PseudoLabels:
    """Density clustering; noise joins the cluster of its nearest clustered point.

    ``min_points`` counts the point itself. With no core point at all every
    sample goes to a single cluster 0.
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    _check(features)
    x = features.vectors
    n = len(x)
    dist = squareform(pdist(x)) if n > 1 else np.zeros((1, 1))
    neighbours = [np.flatnonzero(dist[i] <= eps) for i in range(n)]
    core = np.array([len(nb) >= min_points for nb in neighbours])
    label = np.full(n, -1)
    cluster = 0
    for i in range(n):
        if label[i] != -1 or not core[i]:
            continue
        label[i] = cluster
        queue = [i]
        while queue:
            p = queue.pop(0)
            if not core[p]:
                continue
            for q in neighbours[p]:
                if label[q] == -1:
                    label[q] = cluster
                    queue.append(q)
        cluster += 1
    if cluster == 0:
        label[:] = 0
    else:
        noise = np.flatnonzero(label == -1)
        clustered = np.flatnonzero(label != -1)
        for i in noise:
            label[i] = label[clustered[np.argmin(dist[i, clustered])]]
    return PseudoLabels(features.ids, canonical_labels(label), "dbscan",
                        {"eps": float(eps), "min_points": min_points})


def auto_eps(features: FeatureSet, min_points: int = 4) -> float:
    """Median distance to the (min_points - 1)-th nearest neighbour."""
    dist = squareform(pdist(features.vectors))
    kth = np.sort(dist, axis=1)[:, min(min_points - 1, len(dist) - 1)]
    return float(np.median(kth))


# ---------------------------------------------------------------------------
# elbow


@dataclass
class ElbowCurve:
    points: list  # [(k, mean intra-cluster pairwise distance)]

    def to_csv(self) -> str:
        return "k,mean_intra_distance\n" + "".join(f"{k},{v!r}\n" for k, v in self.points)


def mean_intra_distance(dist: np.ndarray, labels: np.ndarray) -> float:
    """Mean Euclidean distance over all same-cluster pairs (0 when there are none)."""
    same = labels[:, None] == labels[None, :]
    iu = np.triu_indices(len(labels), 1)
    mask = same[iu]
    if not mask.any():
        return 0.0
    return float(dist[iu][mask].mean())


def elbow_curve(features: FeatureSet, k_range, dendrogram: Dendrogram | None = None) -> ElbowCurve:
    ks = list(k_range)
    if not ks:
        raise ValueError("elbow_curve: empty k_range")
    _check(features)
    n = len(features)
    if any(not 1 <= k <= n for k in ks):
        raise ValueError(f"elbow_curve: k_range must lie in [1, {n}]")
    dendrogram = dendrogram or build_dendrogram(features)
    dist = squareform(pdist(features.vectors)) if n > 1 else np.zeros((1, 1))
    return ElbowCurve([(int(k), mean_intra_distance(dist, dendrogram.cut(k))) for k in ks])


def select_k(curve: ElbowCurve) -> int:
    """Knee of the curve: the point farthest from the chord joining its ends.

    Both axes are rescaled to [0, 1] first so the choice does not depend on
    the units of the distances. Ties go to the smallest k.
    """
    pts = sorted(curve.points)
    if len(pts) < 3:
        raise ValueError("select_k: need at least 3 curve points")
    k = np.array([p[0] for p in pts], dtype=float)
    v = np.array([p[1] for p in pts], dtype=float)
    kx = (k - k[0]) / (k[-1] - k[0])
    span = v.max() - v.min()
    vy = (v - v.min()) / span if span > 0 else np.zeros_like(v)
    x0, y0, x1, y1 = kx[0], vy[0], kx[-1], vy[-1]
    length = np.hypot(x1 - x0, y1 - y0)
    dist = np.abs((x1 - x0) * (y0 - vy) - (x0 - kx) * (y1 - y0)) / length
    dist = np.round(dist, 12)
    interior = dist[1:-1]
    return int(k[1 + int(np.argmax(interior))])
