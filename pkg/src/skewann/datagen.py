"""Synthetic dataset generators and the exact brute-force k-NN oracle.

The zipf-skewed generator places cluster populations proportional to
rank^(-alpha) so k-means over the result reproduces the long-tailed
cluster-size histograms the engine is built for. The oracle is a plain
float64 numpy scan, deliberately independent of the engine's kernels.
"""

from __future__ import annotations

import numpy as np


def gen_grid(n, d):
    """A side^d lattice with unit spacing; n must be a perfect d-th power."""
    side = round(n ** (1.0 / d))
    if side ** d != n:
        raise ValueError(f"grid needs n = side^d; {n} is not a {d}-th power")
    axes = [np.arange(side, dtype=np.float32)] * d
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1).astype(np.float32)


def _center_coords(centers, d, rng, spread=10.0):
    return (rng.random((centers, d)) * spread).astype(np.float32)


def gen_blobs(n, d, centers=16, sigma=0.5, seed=0):
    """Equal-population Gaussian blobs; returns (data, labels, center coords)."""
    rng = np.random.default_rng(seed)
    coords = _center_coords(centers, d, rng)
    labels = np.arange(n, dtype=np.int32) % centers
    data = coords[labels] + rng.standard_normal((n, d)).astype(np.float32) * sigma
    return data.astype(np.float32), labels, coords


def gen_zipf(n, d, centers=64, alpha=1.2, sigma=0.5, seed=0, density_skew=0.35):
    """Gaussian blobs with populations proportional to rank^(-alpha).

    Heavier centers get proportionally tighter spreads (sigma scaled by
    population^-density_skew), mimicking dense semantic hubs; without
    this, k-means splits big blobs into equal cells and flattens the
    size distribution the generator exists to produce.
    """
    rng = np.random.default_rng(seed)
    coords = _center_coords(centers, d, rng)
    weights = (np.arange(1, centers + 1, dtype=np.float64)) ** (-alpha)
    weights /= weights.sum()
    counts = np.floor(weights * n).astype(np.int64)
    counts[0] += n - counts.sum()
    labels = np.repeat(np.arange(centers, dtype=np.int32), counts)
    sig = sigma * (counts / counts.max()) ** (-density_skew)
    noise = rng.standard_normal((n, d)).astype(np.float32)
    data = coords[labels] + noise * sig[labels][:, None].astype(np.float32)
    return data.astype(np.float32), labels, coords


def gen_queries(coords, populations, n_queries, sigma, seed=0, hot_frac=None,
                density_skew=0.0):
    """Queries drawn near generating centers, weighted by population.

    With hot_frac set, queries concentrate on that fraction of centers
    (a seeded random subset), modeling a workload that hammers a small
    hot region of the data. density_skew should match the generator's so
    queries land inside their target blob.
    """
    rng = np.random.default_rng(seed + 1)
    centers = len(coords)
    weights = np.asarray(populations, dtype=np.float64)
    sig = sigma * (weights / weights.max()) ** (-density_skew)
    if hot_frac is not None:
        n_hot = max(1, int(round(hot_frac * centers)))
        hot = rng.choice(centers, size=n_hot, replace=False)
        mask = np.zeros(centers)
        mask[hot] = 1.0
        weights = weights * mask
    weights /= weights.sum()
    picks = rng.choice(centers, size=n_queries, p=weights)
    d = coords.shape[1]
    noise = rng.standard_normal((n_queries, d)).astype(np.float32)
    q = coords[picks] + noise * sig[picks][:, None].astype(np.float32)
    return q.astype(np.float32)


def brute_force_knn(data, queries, k, query_chunk=64, data_chunk=4096):
    """Exact k nearest neighbors under squared L2; ties break to lower id.

    Plain-numpy float64 path, deliberately independent of the engine
    kernels. Distances use the same diff-and-square form the engine
    computes, so float rounding cannot reorder near-ties between the
    oracle and the search path.
    """
    data = np.asarray(data, dtype=np.float64)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    n = len(data)
    if k > n:
        raise ValueError(f"k={k} exceeds dataset size {n}")
    out = np.empty((len(queries), k), dtype=np.int32)
    for qs in range(0, len(queries), query_chunk):
        block = queries[qs: qs + query_chunk]
        d2 = np.empty((len(block), n))
        for ds in range(0, n, data_chunk):
            diff = data[ds: ds + data_chunk][None, :, :] - block[:, None, :]
            d2[:, ds: ds + data_chunk] = np.einsum("qij,qij->qi", diff, diff)
        for i, row in enumerate(d2):
            out[qs + i] = np.argsort(row, kind="stable")[:k]
    return out
