"""Navigable proximity-graph construction shared by local indices and the GA.

Build recipe: random-init adjacency, two greedy-search-and-prune
refinement passes (alpha = 1.0 then the configured alpha), then a chain
pass that links nodes in ascending order of distance to the entry point.
Refinement runs with a degree budget of R-1 and the chain adds at most
one edge per node, so the final degree is <= R and every node is
reachable from the entry point by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass
class NavigableGraph:
    neighbors: np.ndarray   # (n, R) int32, row i valid up to degrees[i]
    degrees: np.ndarray     # (n,) int32
    entry_point: int

    @property
    def node_count(self):
        return len(self.degrees)

    def neighbor_row(self, i):
        return self.neighbors[i, : self.degrees[i]]


def _medoid(vectors):
    mean = vectors.mean(axis=0, dtype=np.float64).astype(np.float32)
    return int(np.argmin(kernels.l2sq_batch(mean, vectors)))


def build_navigable_graph(vectors, r=32, alpha=1.2, l_build=64, seed=0):
    """Build a connected navigable graph over in-memory vectors."""
    vectors = np.ascontiguousarray(vectors, dtype=np.float32)
    n = len(vectors)
    if n == 0:
        raise ValueError("cannot build a graph over zero vectors")
    if n == 1:
        return NavigableGraph(np.zeros((1, max(r, 1)), np.int32), np.zeros(1, np.int32), 0)

    r = max(2, min(r, n - 1))
    r_budget = max(1, r - 1)
    entry = _medoid(vectors)
    rng = np.random.default_rng(seed)

    if n - 1 <= r_budget:
        nbrs = np.zeros((n, r), dtype=np.int32)
        degs = np.full(n, n - 1, dtype=np.int32)
        for i in range(n):
            nbrs[i, : n - 1] = [j for j in range(n) if j != i]
    else:
        init = rng.integers(0, n, size=(n, r_budget)).astype(np.int32)
        rows = np.arange(n, dtype=np.int32)[:, None]
        init[init == rows] = (init[init == rows] + 1) % n
        nbrs = np.zeros((n, r), dtype=np.int32)
        nbrs[:, :r_budget] = init
        degs = np.full(n, r_budget, dtype=np.int32)
        order = rng.permutation(n).astype(np.int64)
        nbrs, degs = kernels.build_graph(vectors, nbrs, degs, entry, order,
                                         l_build, alpha, r_budget)

    _add_chain_edges(vectors, nbrs, degs, entry, r)
    return NavigableGraph(nbrs, degs, entry)


def _add_chain_edges(vectors, nbrs, degs, entry, r):
    """Link nodes in ascending distance-to-entry order; guarantees reachability."""
    d = kernels.l2sq_batch(vectors[entry], vectors)
    order = np.lexsort((np.arange(len(vectors)), d))
    for a, b in zip(order[:-1], order[1:]):
        row = nbrs[a, : degs[a]]
        if b in row:
            continue
        if degs[a] < r:
            nbrs[a, degs[a]] = b
            degs[a] += 1
        else:
            nbrs[a, degs[a] - 1] = b  # cannot happen with the R-1 budget; safety


def reachable_from_entry(graph):
    """Boolean reachability mask via BFS from the entry point."""
    n = graph.node_count
    seen = np.zeros(n, dtype=bool)
    stack = [graph.entry_point]
    seen[graph.entry_point] = True
    while stack:
        c = stack.pop()
        for j in graph.neighbor_row(c):
            if not seen[j]:
                seen[j] = True
                stack.append(int(j))
    return seen


def beam_search(vectors, graph, q, beam_width):
    """Beam search over an in-memory graph; (ids, dists) ascending by (d, id)."""
    q = np.ascontiguousarray(q, dtype=np.float32)
    ids, dists, _, _ = kernels.greedy_search(vectors, graph.neighbors, graph.degrees,
                                             graph.entry_point, q, beam_width)
    return ids, dists
