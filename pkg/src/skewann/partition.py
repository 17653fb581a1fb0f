"""IVF-style k-means partitioning with per-vector centroid distances.

The partition is the fixed on-disk layout everything downstream assumes:
cluster membership never changes after build (no rebalancing). Each
vector also carries d(v, CT) -- its true L2 distance to its own cluster
centroid -- which is the pivot metadata the scan-side pruning bound uses.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels

PARTITION_MAGIC = b"ORCP"
_HEADER = struct.Struct("<4sIQI")  # magic, k, N, d

_ASSIGN_CHUNK = 16384


@dataclass
class ClusterPartition:
    k: int
    dim: int
    centroids: np.ndarray      # (k, d) float32
    assignment: np.ndarray     # (N,) int32
    centroid_dist: np.ndarray  # (N,) float32, true L2 to own centroid
    members: list              # per-cluster sorted int32 id arrays

    @property
    def count(self):
        return len(self.assignment)

    @property
    def sizes(self):
        return np.array([len(m) for m in self.members], dtype=np.int64)

    def save(self, path):
        offsets = np.zeros(self.k + 1, dtype=np.uint64)
        offsets[1:] = np.cumsum([len(m) for m in self.members])
        with open(path, "wb") as f:
            f.write(_HEADER.pack(PARTITION_MAGIC, self.k, self.count, self.dim))
            f.write(np.ascontiguousarray(self.centroids, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(self.assignment, dtype="<i4").tobytes())
            f.write(np.ascontiguousarray(self.centroid_dist, dtype="<f4").tobytes())
            f.write(offsets.astype("<u8").tobytes())
            for m in self.members:
                f.write(np.ascontiguousarray(m, dtype="<i4").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            raw = f.read()
        magic, k, n, d = _HEADER.unpack_from(raw, 0)
        if magic != PARTITION_MAGIC:
            raise ValueError(f"{path}: bad partition magic {magic!r}")
        off = _HEADER.size
        centroids = np.frombuffer(raw, "<f4", k * d, off).reshape(k, d).copy()
        off += 4 * k * d
        assignment = np.frombuffer(raw, "<i4", n, off).copy()
        off += 4 * n
        centroid_dist = np.frombuffer(raw, "<f4", n, off).copy()
        off += 4 * n
        offsets = np.frombuffer(raw, "<u8", k + 1, off)
        off += 8 * (k + 1)
        ids = np.frombuffer(raw, "<i4", n, off)
        members = [ids[offsets[i]:offsets[i + 1]].copy() for i in range(k)]
        return cls(k, d, centroids, assignment, centroid_dist, members)


def _assign_all(X, centroids):
    n = len(X)
    assign = np.empty(n, dtype=np.int32)
    best = np.empty(n, dtype=np.float64)
    for s in range(0, n, _ASSIGN_CHUNK):
        e = min(n, s + _ASSIGN_CHUNK)
        assign[s:e], best[s:e] = kernels.assign_chunk(X[s:e], centroids)
    return assign, best


def _kmeans_pp_init(X, k, rng):
    n = len(X)
    centroids = np.empty((k, X.shape[1]), dtype=np.float32)
    centroids[0] = X[rng.integers(n)]
    closest = kernels.l2sq_batch(centroids[0], X)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))  # duplicates everywhere; any point works
        else:
            idx = int(rng.choice(n, p=closest / total))
        centroids[j] = X[idx]
        np.minimum(closest, kernels.l2sq_batch(centroids[j], X), out=closest)
    return centroids


def kmeans(X, k, max_iters, seed, sse_history=None):
    """Lloyd's algorithm with k-means++ init; deterministic for a fixed seed.

    Ties in assignment break toward the lower centroid id. Returns
    (centroids, assignment, best_sq_dist) at the final iteration. When
    ``sse_history`` is a list, the within-cluster SSE after every
    assignment step is appended to it.
    """
    X = np.ascontiguousarray(X, dtype=np.float32)
    n = len(X)
    if k <= 0:
        raise ValueError("k must be positive")
    if k > n:
        raise ValueError(f"k={k} exceeds point count {n}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(X, k, rng)
    assign, best = _assign_all(X, centroids)
    if sse_history is not None:
        sse_history.append(float(best.sum()))
    for _ in range(max_iters):
        sums = np.zeros((k, X.shape[1]), dtype=np.float64)
        np.add.at(sums, assign, X.astype(np.float64))
        counts = np.bincount(assign, minlength=k)
        nonempty = counts > 0
        new_centroids = centroids.copy()
        new_centroids[nonempty] = (sums[nonempty] / counts[nonempty, None]).astype(np.float32)
        new_assign, new_best = _assign_all(X, new_centroids)
        if sse_history is not None:
            sse_history.append(float(new_best.sum()))
        converged = np.array_equal(new_assign, assign)
        centroids, assign, best = new_centroids, new_assign, new_best
        if converged:
            break
    return centroids, assign, best


def _repair_empty(X, centroids, assign, best):
    """Give each empty cluster the farthest point of the largest cluster."""
    k = len(centroids)
    counts = np.bincount(assign, minlength=k)
    empties = np.flatnonzero(counts == 0)
    if empties.size == 0:
        return centroids, assign, best, False
    for c in empties:
        donor = int(np.argmax(counts))
        members = np.flatnonzero(assign == donor)
        victim = members[np.argmax(best[members])]
        assign[victim] = c
        centroids[c] = X[victim]
        best[victim] = 0.0
        counts[donor] -= 1
        counts[c] += 1
    return centroids, assign, best, True


def kmeans_with_repair(X, k, max_iters, seed):
    """kmeans followed by empty-cluster repair and one extra Lloyd step."""
    X = np.ascontiguousarray(X, dtype=np.float32)
    centroids, assign, best = kmeans(X, k, max_iters, seed)
    centroids, assign, best, repaired = _repair_empty(X, centroids, assign, best)
    if repaired:
        # one extra Lloyd step so donor centroids settle
        sums = np.zeros((k, X.shape[1]), dtype=np.float64)
        np.add.at(sums, assign, X.astype(np.float64))
        counts = np.bincount(assign, minlength=k)
        centroids = (sums / counts[:, None]).astype(np.float32)
        assign, best = _assign_all(X, centroids)
        centroids, assign, best, _ = _repair_empty(X, centroids, assign, best)
    return centroids, assign, best


def kmeans_partition(store, k, max_iters=25, seed=0):
    """Partition a store into k clusters; no empty clusters in the result."""
    if store.count == 0:
        raise ValueError("cannot partition an empty store")
    if k > store.count:
        raise ValueError(f"k={k} exceeds vector count {store.count}")
    X = np.ascontiguousarray(store.load_all(), dtype=np.float32)
    centroids, assign, best = kmeans_with_repair(X, k, max_iters, seed)
    members = [np.flatnonzero(assign == c).astype(np.int32) for c in range(k)]
    centroid_dist = np.sqrt(best).astype(np.float32)
    return ClusterPartition(k, X.shape[1], centroids, assign.astype(np.int32),
                            centroid_dist, members)


@dataclass
class SkewReport:
    min: int
    max: int
    mean: float
    std: float
    histogram: list  # (bucket_low, bucket_high, count) with power-of-two edges

    def to_dict(self):
        return {
            "min": self.min,
            "max": self.max,
            "mean": self.mean,
            "std": self.std,
            "histogram": [list(b) for b in self.histogram],
        }


def skew_report(partition):
    """Cluster-size statistics (population std) with log2-bucket histogram."""
    sizes = partition.sizes if isinstance(partition, ClusterPartition) else np.asarray(partition)
    sizes = sizes.astype(np.float64)
    mean = float(sizes.mean())
    std = float(np.sqrt(((sizes - mean) ** 2).mean()))
    hi = int(sizes.max())
    edges = [1]
    while edges[-1] <= hi:
        edges.append(edges[-1] * 2)
    hist = []
    for lo, up in zip(edges[:-1], edges[1:]):
        c = int(np.count_nonzero((sizes >= lo) & (sizes < up)))
        hist.append((lo, up, c))
    return SkewReport(int(sizes.min()), hi, mean, std, hist)


def assign_query_clusters(partition, q, m):
    """The m nearest centroid ids, ascending by distance, ties to lower id."""
    if m <= 0:
        raise ValueError("m must be positive")
    if m > partition.k:
        raise ValueError(f"m={m} exceeds cluster count {partition.k}")
    d = kernels.l2sq_batch(np.ascontiguousarray(q, dtype=np.float32), partition.centroids)
    order = np.argsort(d, kind="stable")
    return order[:m].astype(np.int32)
