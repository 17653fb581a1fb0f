"""Per-cluster disk-resident indices: Flat scan, navigable graph, IVF-Flat.

All three sit behind one search shape: they update a shared top-k queue
in place and reject candidates *before* fetching raw vectors whenever a
triangle-inequality lower bound already exceeds the queue's k-th
distance. Pivots differ by type: graph searches use stored per-edge
distances (pivot = the node being expanded), scans use the whole-cluster
centroid with the partition's per-vector centroid distances.

Bounds compare true (non-squared) L2 values; the queue itself carries
squared distances and is square-rooted once per comparison batch.
"""

from __future__ import annotations

import heapq
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .partition import kmeans_with_repair
from .profiler import FLAT, GRAPH, IVFFLAT, nlist_rule

INDEX_MAGIC = b"ORLI"
_HEADER = struct.Struct("<4sIBQI4Q")  # magic, cluster_id, type, count, dim, 4 section offsets

_EDGE_DTYPE = np.dtype([("nbr", "<u4"), ("dist", "<f4")])
# small enough that the threshold tightens quickly within a cluster scan,
# big enough that the per-chunk kernel and fetch overheads stay amortized
_SCAN_CHUNK = 1024


@dataclass
class SearchBudget:
    """Beam knobs for graph-local search: queue capacity L, hop cap, pruning."""

    l: int = 64
    max_hops: int = 0  # 0 -> unbounded
    pruning: bool = True

    def for_k(self, k):
        return SearchBudget(max(self.l, 2 * k), self.max_hops, self.pruning)


class VisitTrace:
    """What one local search touched, for hot-region scoring.

    Graph searches record (vector id, pop depth) per expanded node plus
    the total pop count; scans record the fetched ids.
    """

    __slots__ = ("kind", "ids", "depths", "depth_max")

    def __init__(self, kind, ids, depths=None, depth_max=0):
        self.kind = kind
        self.ids = np.asarray(ids, dtype=np.int64)
        self.depths = None if depths is None else np.asarray(depths, dtype=np.int64)
        self.depth_max = depth_max


def _as_f32(block):
    return np.ascontiguousarray(block, dtype=np.float32)


# ---------------------------------------------------------------------------
# index objects
# ---------------------------------------------------------------------------


class FlatLocalIndex:
    index_type = FLAT

    def __init__(self, cluster_id, dim, member_ids, centroid, member_cd):
        self.cluster_id = cluster_id
        self.dim = dim
        self.member_ids = member_ids
        self.centroid = centroid
        self.member_cd = member_cd  # d(v, CT_C), true L2, from the partition

    @property
    def count(self):
        return len(self.member_ids)

    def search(self, q, topk, ctx, pruning=True, dist_q_centroid=None, stats=None):
        """Exhaustive scan with reject-before-fetch using the centroid pivot."""
        dq = dist_q_centroid
        if pruning and dq is None:
            dq = math.sqrt(kernels.l2sq_pair(_as_f32(q), self.centroid))
        return _scan_members(q, self.member_ids, self.member_cd, topk, ctx,
                             pruning, dq, stats)


class GraphLocalIndex:
    index_type = GRAPH

    def __init__(self, cluster_id, dim, member_ids, offsets, edges, entry_point):
        self.cluster_id = cluster_id
        self.dim = dim
        self.member_ids = member_ids
        self.offsets = offsets        # (n+1,) int64 CSR row bounds
        self.edges = edges            # structured (nbr u32, dist f32)
        self.entry_point = entry_point

    @property
    def count(self):
        return len(self.member_ids)

    def neighbor_row(self, lid):
        return self.edges[self.offsets[lid]:self.offsets[lid + 1]]

    def verify_edges(self, store, fraction=0.01, rtol=1e-4):
        """Spot-check stored edge distances against recomputed true L2."""
        total = len(self.edges)
        if total == 0:
            return 0
        rng = np.random.default_rng(self.cluster_id)
        n_check = max(1, int(math.ceil(total * fraction)))
        picks = rng.choice(total, size=min(n_check, total), replace=False)
        src = np.searchsorted(self.offsets, picks, side="right") - 1
        for e, s in zip(picks, src):
            a = store._read_raw(int(self.member_ids[s]))
            b = store._read_raw(int(self.member_ids[self.edges[e]["nbr"]]))
            true = math.sqrt(kernels.l2sq_pair(_as_f32(a), _as_f32(b)))
            stored = float(self.edges[e]["dist"])
            if abs(stored - true) > rtol * max(true, 1e-12):
                raise ValueError(
                    f"cluster {self.cluster_id}: edge {e} distance {stored} "
                    f"deviates from recomputed {true}"
                )
        return len(picks)

    def search(self, q, topk, ctx, budget, seed_local=None, stats=None):
        """Best-first beam search; pruned neighbors are enqueued unfetched.

        A neighbor whose lower bound |Dist(q, v_i) - Dist(v_i, v_j)|
        exceeds the current k-th distance is enqueued keyed by that bound
        and only fetched if it is popped while its bound has dropped back
        under the (non-increasing) threshold; otherwise it is discarded.
        """
        q = _as_f32(q)
        n = self.count
        start = self.entry_point if seed_local is None else int(seed_local)
        if not 0 <= start < n:
            raise ValueError(f"invalid seed node {start} for cluster of {n}")
        pruning = budget.pruning
        cap_l = budget.l
        max_hops = budget.max_hops if budget.max_hops > 0 else n + 1

        visited = np.zeros(n, dtype=bool)
        frontier = []  # (key_l2, lid, fetched, dist_sq): heap on (key, lid)

        def score(lid):
            vec = ctx.get_vector(int(self.member_ids[lid]))
            d = float(kernels.l2sq_pair(q, _as_f32(vec)))
            topk.update(int(self.member_ids[lid]), d)
            return d

        visited[start] = True
        d0 = score(start)
        heapq.heappush(frontier, (math.sqrt(d0), start, True, d0))
        beam = []  # max-heap (neg key, neg lid) of fetched nodes, size <= L
        trace_ids, trace_depths = [], []
        pops = 0
        rejected = set() if stats is not None and stats.collect_rejections else None

        while frontier and pops < max_hops:
            key, lid, fetched, dsq = heapq.heappop(frontier)
            if len(beam) == cap_l and (key, lid) > (-beam[0][0], -beam[0][1]):
                break
            if not fetched:
                if key > topk.threshold_l2():
                    continue  # bound still exceeds Dis: discarded, never fetched
                dsq = score(lid)
                if stats is not None:
                    stats.candidates_rejected_by_bound -= 1
                if rejected is not None:
                    rejected.discard(int(self.member_ids[lid]))
                heapq.heappush(frontier, (math.sqrt(dsq), lid, True, dsq))
                continue

            pops += 1
            trace_ids.append(int(self.member_ids[lid]))
            trace_depths.append(pops)
            heapq.heappush(beam, (-key, -lid))
            if len(beam) > cap_l:
                heapq.heappop(beam)

            row = self.neighbor_row(lid)
            dis = topk.threshold_l2() if pruning else math.inf
            for nbr, edge_d in zip(row["nbr"], row["dist"]):
                nbr = int(nbr)
                if visited[nbr]:
                    continue
                visited[nbr] = True
                if pruning:
                    lb = abs(key - float(edge_d))
                    if lb > dis:
                        heapq.heappush(frontier, (lb, nbr, False, 0.0))
                        if stats is not None:
                            stats.candidates_rejected_by_bound += 1
                        if rejected is not None:
                            rejected.add(int(self.member_ids[nbr]))
                        continue
                dn = score(nbr)
                heapq.heappush(frontier, (math.sqrt(dn), nbr, True, dn))
                dis = topk.threshold_l2() if pruning else math.inf

        if rejected is not None:
            stats.rejected_ids.extend(rejected)
        return VisitTrace("graph", trace_ids, trace_depths, pops)


class IvfFlatLocalIndex:
    index_type = IVFFLAT

    def __init__(self, cluster_id, dim, member_ids, nlist, sub_centroids,
                 list_offsets, list_members, centroid, member_cd):
        self.cluster_id = cluster_id
        self.dim = dim
        self.member_ids = member_ids
        self.nlist = nlist
        self.sub_centroids = sub_centroids
        self.list_offsets = list_offsets   # (nlist+1,) int64
        self.list_members = list_members   # local positions, concatenated
        self.centroid = centroid
        self.member_cd = member_cd

    @property
    def count(self):
        return len(self.member_ids)

    def search(self, q, topk, ctx, local_nprobe, pruning=True,
               dist_q_centroid=None, stats=None):
        """Scan the local_nprobe nearest posting lists with centroid-pivot pruning."""
        q32 = _as_f32(q)
        if local_nprobe <= 0 or local_nprobe > self.nlist:
            local_nprobe = self.nlist
        dq = dist_q_centroid
        if pruning and dq is None:
            dq = math.sqrt(kernels.l2sq_pair(q32, self.centroid))
        sub_d = kernels.l2sq_batch(q32, self.sub_centroids)
        order = np.argsort(sub_d, kind="stable")[:local_nprobe]
        traces = []
        for li in order:
            lo, hi = self.list_offsets[li], self.list_offsets[li + 1]
            local = self.list_members[lo:hi]
            tr = _scan_members(q, self.member_ids[local], self.member_cd[local],
                               topk, ctx, pruning, dq, stats)
            traces.append(tr.ids)
        ids = np.concatenate(traces) if traces else np.empty(0, dtype=np.int64)
        return VisitTrace("scan", ids)


def _scan_members(q, member_ids, member_cd, topk, ctx, pruning, dist_q_centroid, stats):
    """Chunked scan: mask with the centroid-pivot bound, fetch survivors, score."""
    q = _as_f32(q)
    fetched_ids = []
    n = len(member_ids)
    for s in range(0, n, _SCAN_CHUNK):
        ids = member_ids[s: s + _SCAN_CHUNK]
        if pruning:
            thr = topk.threshold_l2()
            mask = kernels.lb_exceeds(dist_q_centroid, member_cd[s: s + _SCAN_CHUNK], thr)
            keep = ids[~mask]
            n_rej = int(mask.sum())
            if stats is not None:
                stats.candidates_rejected_by_bound += n_rej
                if stats.collect_rejections and n_rej:
                    stats.rejected_ids.extend(int(i) for i in ids[mask])
        else:
            keep = ids
        if len(keep) == 0:
            continue
        block = ctx.get_vectors(keep)
        dists = kernels.l2sq_batch(q, _as_f32(block))
        topk.update_batch(keep, dists)
        fetched_ids.append(np.asarray(keep, dtype=np.int64))
    ids = np.concatenate(fetched_ids) if fetched_ids else np.empty(0, dtype=np.int64)
    return VisitTrace("scan", ids)


# ---------------------------------------------------------------------------
# build / save / load
# ---------------------------------------------------------------------------


@dataclass
class BuildParams:
    r: int = 32
    alpha: float = 1.2
    l_build: int = 64
    nlist_max: int = 1024
    sub_kmeans_iters: int = 10
    seed: int = 0


def build_local_index(store, part, cluster_id, index_type, path, params=None):
    """Build one cluster's index and write it as a cluster_<id>.idx file."""
    params = params or BuildParams()
    members = part.members[cluster_id]
    if len(members) == 0:
        raise ValueError(f"cluster {cluster_id} is empty")
    dim = store.dim

    if index_type == FLAT:
        sections = [np.ascontiguousarray(members, dtype="<i4").tobytes()]
    elif index_type == GRAPH:
        from .navgraph import build_navigable_graph, reachable_from_entry

        vecs = _as_f32(store.fetch_block(members))
        g = build_navigable_graph(vecs, r=params.r, alpha=params.alpha,
                                  l_build=params.l_build,
                                  seed=params.seed + cluster_id)
        if not reachable_from_entry(g).all():
            raise AssertionError(f"cluster {cluster_id}: graph not fully reachable")
        n = len(members)
        offsets = np.zeros(n + 1, dtype=np.int64)
        offsets[1:] = np.cumsum(g.degrees)
        edges = np.zeros(int(offsets[-1]), dtype=_EDGE_DTYPE)
        for i in range(n):
            row = g.neighbor_row(i)
            lo = offsets[i]
            edges["nbr"][lo:lo + len(row)] = row
            ds = kernels.l2sq_batch(vecs[i], vecs[row])
            edges["dist"][lo:lo + len(row)] = np.sqrt(ds)
        sections = [
            np.ascontiguousarray(members, dtype="<i4").tobytes(),
            struct.pack("<I", g.entry_point)
            + offsets.astype("<i8").tobytes()
            + edges.tobytes(),
        ]
    elif index_type == IVFFLAT:
        vecs = _as_f32(store.fetch_block(members))
        nlist = nlist_rule(len(members), params.nlist_max)
        if nlist >= len(members):
            nlist = max(1, len(members))
            sub_centroids = vecs[:nlist].copy()
            sub_assign = np.arange(len(members)) % nlist
        else:
            sub_centroids, sub_assign, _ = kmeans_with_repair(
                vecs, nlist, params.sub_kmeans_iters, params.seed + cluster_id)
        list_members = np.argsort(sub_assign, kind="stable").astype(np.int32)
        counts = np.bincount(sub_assign, minlength=nlist)
        offsets = np.zeros(nlist + 1, dtype=np.int64)
        offsets[1:] = np.cumsum(counts)
        sections = [
            np.ascontiguousarray(members, dtype="<i4").tobytes(),
            struct.pack("<I", nlist)
            + np.ascontiguousarray(sub_centroids, dtype="<f4").tobytes(),
            offsets.astype("<i8").tobytes()
            + np.ascontiguousarray(list_members, dtype="<i4").tobytes(),
        ]
    else:
        raise ValueError(f"unknown index type {index_type!r}")

    offs = [0, 0, 0, 0]
    pos = _HEADER.size
    for i, sec in enumerate(sections):
        offs[i] = pos
        pos += len(sec)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(INDEX_MAGIC, cluster_id, index_type,
                             len(members), dim, *offs))
        for sec in sections:
            f.write(sec)


def load_local_index(path, part, store=None, verify_fraction=0.01):
    """Load a cluster index file, wiring in partition pivot metadata.

    For graph indices a deterministic >= 1% sample of edge distances is
    re-verified against the store when one is supplied.
    """
    with open(path, "rb") as f:
        raw = f.read()
    magic, cluster_id, itype, count, dim, o0, o1, o2, o3 = _HEADER.unpack_from(raw, 0)
    if magic != INDEX_MAGIC:
        raise ValueError(f"{path}: bad local-index magic {magic!r}")
    members = np.frombuffer(raw, "<i4", count, o0).copy()
    expected = len(part.members[cluster_id])
    if count != expected:
        raise ValueError(f"{path}: header count {count} != partition N_i {expected}")
    centroid = _as_f32(part.centroids[cluster_id])
    member_cd = part.centroid_dist[members]

    if itype == FLAT:
        return FlatLocalIndex(cluster_id, dim, members, centroid, member_cd)
    if itype == GRAPH:
        entry = struct.unpack_from("<I", raw, o1)[0]
        off = o1 + 4
        offsets = np.frombuffer(raw, "<i8", count + 1, off)
        off += 8 * (count + 1)
        edges = np.frombuffer(raw, _EDGE_DTYPE, int(offsets[-1]), off)
        idx = GraphLocalIndex(cluster_id, dim, members, offsets, edges, int(entry))
        if store is not None and verify_fraction > 0:
            idx.verify_edges(store, verify_fraction)
        return idx
    if itype == IVFFLAT:
        nlist = struct.unpack_from("<I", raw, o1)[0]
        sub_centroids = np.frombuffer(raw, "<f4", nlist * dim, o1 + 4).reshape(nlist, dim).copy()
        offsets = np.frombuffer(raw, "<i8", nlist + 1, o2)
        list_members = np.frombuffer(raw, "<i4", count, o2 + 8 * (nlist + 1)).copy()
        return IvfFlatLocalIndex(cluster_id, dim, members, nlist, sub_centroids,
                                 offsets, list_members, centroid, member_cd)
    raise ValueError(f"{path}: unknown index type code {itype}")
