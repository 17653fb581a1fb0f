"""Query-aware in-memory navigation graph with epoch-based refresh.

The graph abstraction (GA) is a compact navigable graph over cluster
centroids plus sampled vectors; every node maps to (vector id, cluster
id, local position) so traversal yields per-cluster entry seeds. Query
workers feed private count-min sketches and per-vector convergence
scores; every delta-Q queries a background updater harvests them, clones
the snapshot, swaps up to h hot vectors in and h cold ones out, and
publishes the new version by an atomic reference swap. Queries always
run against the immutable snapshot they captured; old versions are
reclaimed once their in-flight count reaches zero.
"""

from __future__ import annotations

import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .navgraph import NavigableGraph, _add_chain_edges, build_navigable_graph

GA_MAGIC = b"ORGA"
_GA_HEADER = struct.Struct("<4sQQIIQI")  # magic, version, n, dim, R, bootstrap, entry

SCAN_EPSILON = 0.01  # phi_conv for scanned-but-not-top-k vectors


# ---------------------------------------------------------------------------
# count-min sketch
# ---------------------------------------------------------------------------


class CountMinSketch:
    """Frequency sketch with one-sided error: estimate(v) >= true count(v).

    Width w = ceil(e / eps) bounds the overestimate by eps * total with
    probability >= 1 - delta at depth ceil(ln(1/delta)). Rows hash with
    independently-seeded splitmix64 mixing.
    """

    def __init__(self, width=2048, depth=4, seed=0):
        if width < 1 or depth < 1:
            raise ValueError("width and depth must be positive")
        self.width = width
        self.depth = depth
        self.counters = np.zeros((depth, width), dtype=np.uint64)
        rng = np.random.default_rng(seed)
        self.row_seeds = rng.integers(1, 2**63 - 1, size=depth, dtype=np.uint64)
        self.total = 0

    def _indices(self, keys):
        keys = np.asarray(keys, dtype=np.int64).astype(np.uint64)
        out = np.empty((self.depth, len(keys)), dtype=np.int64)
        for r in range(self.depth):
            x = keys + self.row_seeds[r]
            x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            x = x ^ (x >> np.uint64(31))
            out[r] = (x % np.uint64(self.width)).astype(np.int64)
        return out

    def add(self, keys):
        keys = np.atleast_1d(np.asarray(keys, dtype=np.int64))
        if keys.size == 0:
            return
        idx = self._indices(keys)
        for r in range(self.depth):
            np.add.at(self.counters[r], idx[r], 1)
        self.total += len(keys)

    def estimate(self, keys):
        scalar = np.ndim(keys) == 0
        keys = np.atleast_1d(np.asarray(keys, dtype=np.int64))
        idx = self._indices(keys)
        est = self.counters[0][idx[0]]
        for r in range(1, self.depth):
            est = np.minimum(est, self.counters[r][idx[r]])
        est = est.astype(np.int64)
        return int(est[0]) if scalar else est


@dataclass
class WorkerStats:
    """Per-worker private trace accumulator: a CMS plus max-phi per vector."""

    sketch: CountMinSketch
    phi_max: dict = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock)


def record_trace(worker, trace, topk_ids=None):
    """Fold one local-search trace into a worker's sketch and phi table.

    Graph traces score phi = Depth(v) / Depth_max; scan traces score 1
    for vectors in the final top-k and SCAN_EPSILON otherwise.
    """
    if len(trace.ids) == 0:
        return
    if trace.kind == "graph":
        phis = trace.depths / max(trace.depth_max, 1)
    else:
        members = np.isin(trace.ids, np.asarray(list(topk_ids or ()), dtype=np.int64))
        phis = np.where(members, 1.0, SCAN_EPSILON)
    with worker.lock:
        worker.sketch.add(trace.ids)
        pm = worker.phi_max
        for vid, phi in zip(trace.ids, phis):
            vid = int(vid)
            prev = pm.get(vid)
            if prev is None or phi > prev:
                pm[vid] = float(phi)


def harvest_scores(workers):
    """Epoch-end Score(v) = (sum of CMS estimates) * (max phi observed).

    Swaps every worker to a fresh sketch under its lock and reads the
    retired state exclusively.
    """
    retired = []
    for w in workers:
        with w.lock:
            retired.append((w.sketch, w.phi_max))
            w.sketch = CountMinSketch(w.sketch.width, w.sketch.depth)
            w.phi_max = {}
    scores = {}
    for sketch, phi_max in retired:
        if not phi_max:
            continue
        ids = np.fromiter(phi_max.keys(), dtype=np.int64)
        est = sketch.estimate(ids)
        for vid, e in zip(ids, est):
            vid = int(vid)
            scores[vid] = scores.get(vid, 0.0) + float(e) * phi_max[vid]
    return scores


# ---------------------------------------------------------------------------
# hot vector cache
# ---------------------------------------------------------------------------


class HotVectorCache:
    """Pinned raw vectors for current hot nodes, LRU-bounded by bytes."""

    def __init__(self, byte_budget=64 * 1024 * 1024):
        self.byte_budget = byte_budget
        self._entries = OrderedDict()
        self._bytes = 0
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, vid):
        with self._lock:
            vec = self._entries.get(vid)
            if vec is None:
                self.misses += 1
                return None
            self._entries.move_to_end(vid)
            self.hits += 1
            return vec

    def pin(self, vid, vec):
        with self._lock:
            if vid in self._entries:
                self._entries.move_to_end(vid)
                return
            self._entries[vid] = vec
            self._bytes += vec.nbytes
            while self._bytes > self.byte_budget and len(self._entries) > 1:
                _, old = self._entries.popitem(last=False)
                self._bytes -= old.nbytes

    def evict(self, vid):
        with self._lock:
            vec = self._entries.pop(vid, None)
            if vec is not None:
                self._bytes -= vec.nbytes

    @property
    def bytes_used(self):
        return self._bytes

    def __contains__(self, vid):
        with self._lock:
            return vid in self._entries


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------


@dataclass
class Seed:
    vector_id: int   # -1 for centroid nodes
    cid: int
    local_pos: int   # -1 for centroid nodes
    dist: float


class NavGraphSnapshot:
    """One immutable GA version: node table, vectors, navigable adjacency."""

    def __init__(self, version, vec_ids, cids, local_pos, protected, vectors,
                 graph, bootstrap_size):
        self.version = version
        self.vec_ids = vec_ids
        self.cids = cids
        self.local_pos = local_pos
        self.protected = protected
        self.vectors = vectors
        self.graph = graph
        self.bootstrap_size = bootstrap_size

    @property
    def node_count(self):
        return len(self.vec_ids)

    def present_vector_ids(self):
        return set(int(v) for v in self.vec_ids[self.vec_ids >= 0])

    def save(self, path):
        g = self.graph
        with open(path, "wb") as f:
            f.write(_GA_HEADER.pack(GA_MAGIC, self.version, self.node_count,
                                    self.vectors.shape[1], g.neighbors.shape[1],
                                    self.bootstrap_size, g.entry_point))
            f.write(self.vec_ids.astype("<i8").tobytes())
            f.write(self.cids.astype("<i4").tobytes())
            f.write(self.local_pos.astype("<i8").tobytes())
            f.write(self.protected.astype("<u1").tobytes())
            f.write(np.ascontiguousarray(self.vectors, dtype="<f4").tobytes())
            f.write(g.degrees.astype("<i4").tobytes())
            f.write(np.ascontiguousarray(g.neighbors, dtype="<i4").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            raw = f.read()
        magic, version, n, dim, r, boot, entry = _GA_HEADER.unpack_from(raw, 0)
        if magic != GA_MAGIC:
            raise ValueError(f"{path}: bad GA magic {magic!r}")
        off = _GA_HEADER.size
        vec_ids = np.frombuffer(raw, "<i8", n, off).copy(); off += 8 * n
        cids = np.frombuffer(raw, "<i4", n, off).copy(); off += 4 * n
        local_pos = np.frombuffer(raw, "<i8", n, off).copy(); off += 8 * n
        protected = np.frombuffer(raw, "<u1", n, off).astype(bool); off += n
        vectors = np.frombuffer(raw, "<f4", n * dim, off).reshape(n, dim).copy()
        off += 4 * n * dim
        degrees = np.frombuffer(raw, "<i4", n, off).copy(); off += 4 * n
        neighbors = np.frombuffer(raw, "<i4", n * r, off).reshape(n, r).copy()
        graph = NavigableGraph(neighbors, degrees, int(entry))
        return cls(int(version), vec_ids, cids, local_pos, protected, vectors,
                   graph, int(boot))


def bootstrap_ga(store, part, samples_per_cluster=8, r=32, alpha=1.2,
                 l_build=64, seed=0):
    """Version-0 GA: all centroids plus s random samples per cluster.

    Every bootstrap node is protected against cold-removal so coverage
    of all clusters can never collapse.
    """
    rng = np.random.default_rng(seed)
    vec_ids, cids, local_pos, vecs = [], [], [], []
    for c in range(part.k):
        vec_ids.append(-1)
        cids.append(c)
        local_pos.append(-1)
        vecs.append(part.centroids[c])
        members = part.members[c]
        s = min(samples_per_cluster, len(members))
        if s > 0:
            picks = np.sort(rng.choice(len(members), size=s, replace=False))
            for p in picks:
                vec_ids.append(int(members[p]))
                cids.append(c)
                local_pos.append(int(p))
            vecs.append(np.asarray(store.fetch_block(members[picks]), dtype=np.float32))
    vec_ids = np.array(vec_ids, dtype=np.int64)
    cids = np.array(cids, dtype=np.int32)
    local_pos = np.array(local_pos, dtype=np.int64)
    vectors = np.vstack([np.atleast_2d(v) for v in vecs]).astype(np.float32)
    protected = np.ones(len(vec_ids), dtype=bool)
    graph = build_navigable_graph(vectors, r=r, alpha=alpha, l_build=l_build, seed=seed)
    return NavGraphSnapshot(0, vec_ids, cids, local_pos, protected, vectors,
                            graph, len(vec_ids))


def traverse_ga(snapshot, q, nprobe, beam_width=None):
    """The nprobe nearest GA nodes to q, each carrying its cluster mapping."""
    if nprobe < 1:
        raise ValueError("nprobe must be >= 1")
    q = np.ascontiguousarray(q, dtype=np.float32)
    n = snapshot.node_count
    if beam_width is None:
        beam_width = max(64, 2 * nprobe)
    if nprobe >= n or beam_width >= n:
        d = kernels.l2sq_batch(q, snapshot.vectors)
        order = np.argsort(d, kind="stable")[:nprobe]
        ids, dists = order, d[order]
    else:
        g = snapshot.graph
        ids, dists, _, _ = kernels.greedy_search(snapshot.vectors, g.neighbors,
                                                 g.degrees, g.entry_point, q,
                                                 beam_width)
        ids, dists = ids[:nprobe], dists[:nprobe]
    return [
        Seed(int(snapshot.vec_ids[i]), int(snapshot.cids[i]),
             int(snapshot.local_pos[i]), float(d))
        for i, d in zip(ids, dists)
    ]


# ---------------------------------------------------------------------------
# refresh
# ---------------------------------------------------------------------------


def _prune_candidates(vectors, node, cand, alpha, budget):
    """Occlusion-pruned neighbor selection (same rule as the graph builder)."""
    cand = np.unique(np.asarray(cand, dtype=np.int64))
    cand = cand[cand != node]
    if len(cand) == 0:
        return np.empty(0, dtype=np.int32)
    d = kernels.l2sq_batch(vectors[node], vectors[cand])
    order = np.lexsort((cand, d))
    cand, d = cand[order], d[order]
    alive = np.ones(len(cand), dtype=bool)
    sel = []
    a2 = alpha * alpha
    for i in range(len(cand)):
        if not alive[i]:
            continue
        sel.append(int(cand[i]))
        if len(sel) == budget:
            break
        alive[i] = False
        rest = np.flatnonzero(alive)
        if rest.size:
            dp = kernels.l2sq_batch(vectors[cand[i]], vectors[cand[rest]])
            alive[rest[a2 * dp <= d[rest]]] = False
    return np.array(sel, dtype=np.int32)


def plan_refresh(snapshot, scores, h):
    """Pick the vector ids to insert (H+) and node rows to remove (H-).

    Insertions and removals are each capped at h and the resulting node
    count is clamped to bootstrap_size +/- h.
    """
    present = snapshot.present_vector_ids()
    hot = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:h]
    hot_ids = [vid for vid, _ in hot]
    insert_ids = [vid for vid in hot_ids if vid not in present]

    removable = [
        i for i in range(snapshot.node_count)
        if not snapshot.protected[i] and int(snapshot.vec_ids[i]) not in hot_ids
    ]
    removable.sort(key=lambda i: (scores.get(int(snapshot.vec_ids[i]), 0.0),
                                  int(snapshot.vec_ids[i])))
    cur = snapshot.node_count
    s0, cap = snapshot.bootstrap_size, h
    n_rem = min(h, len(removable), cur - (s0 - cap))
    n_rem = max(n_rem, 0)
    max_ins = (s0 + cap) - (cur - n_rem)
    insert_ids = insert_ids[: max(0, min(h, max_ins))]
    return insert_ids, removable[:n_rem]


def refresh_ga(snapshot, scores, h, store, part, cache=None, alpha=1.2,
               l_search=64):
    """Clone -> delete H- -> insert H+ -> new snapshot (version + 1)."""
    insert_ids, remove_rows = plan_refresh(snapshot, scores, h)
    n_old = snapshot.node_count
    keep = np.ones(n_old, dtype=bool)
    keep[remove_rows] = False
    removed_vec_ids = [int(snapshot.vec_ids[i]) for i in remove_rows]

    remap = -np.ones(n_old, dtype=np.int32)
    remap[keep] = np.arange(int(keep.sum()), dtype=np.int32)
    n_new = int(keep.sum()) + len(insert_ids)
    r_cap = snapshot.graph.neighbors.shape[1]
    budget = max(1, r_cap - 1)
    dim = snapshot.vectors.shape[1]

    vec_ids = np.empty(n_new, dtype=np.int64)
    cids = np.empty(n_new, dtype=np.int32)
    local_pos = np.empty(n_new, dtype=np.int64)
    protected = np.zeros(n_new, dtype=bool)
    vectors = np.empty((n_new, dim), dtype=np.float32)
    nk = int(keep.sum())
    vec_ids[:nk] = snapshot.vec_ids[keep]
    cids[:nk] = snapshot.cids[keep]
    local_pos[:nk] = snapshot.local_pos[keep]
    protected[:nk] = snapshot.protected[keep]
    vectors[:nk] = snapshot.vectors[keep]

    # remap surviving adjacency; collect replacement candidates from the
    # out-edges of deleted nodes so damaged rows keep their reach
    nbrs = np.zeros((n_new, r_cap), dtype=np.int32)
    degs = np.zeros(n_new, dtype=np.int32)
    old_g = snapshot.graph
    deleted_out = {}
    for i in remove_rows:
        deleted_out[i] = [int(j) for j in old_g.neighbor_row(i) if keep[j]]
    for i in range(n_old):
        if not keep[i]:
            continue
        ni = remap[i]
        row = old_g.neighbor_row(i)
        kept_row = [int(remap[j]) for j in row if keep[j]]
        lost = [int(j) for j in row if not keep[j]]
        if lost:
            pool = list(kept_row)
            for j in lost:
                pool.extend(remap[t] for t in deleted_out[j] if remap[t] != ni)
            sel = _prune_candidates(vectors[:nk], int(ni), pool, alpha, budget)
            degs[ni] = len(sel)
            nbrs[ni, : len(sel)] = sel
        else:
            degs[ni] = len(kept_row)
            nbrs[ni, : len(kept_row)] = kept_row

    inserted_vec_ids = []
    for pos, vid in enumerate(insert_ids):
        ni = nk + pos
        c = int(part.assignment[vid])
        lp = int(np.searchsorted(part.members[c], vid))
        vec = np.asarray(store.fetch(vid), dtype=np.float32)
        vec_ids[ni] = vid
        cids[ni] = c
        local_pos[ni] = lp
        vectors[ni] = vec
        if cache is not None:
            cache.pin(vid, store._read_raw(vid))
        cur_n = ni  # nodes 0..ni-1 are live
        sub_entry = _protected_entry(vectors[:cur_n], protected[:cur_n])
        _, _, pool, _ = kernels.greedy_search(vectors[:cur_n], nbrs[:cur_n],
                                              degs[:cur_n], sub_entry,
                                              vec, l_search)
        sel = _prune_candidates(vectors[: ni + 1], ni, pool, alpha, budget)
        degs[ni] = len(sel)
        nbrs[ni, : len(sel)] = sel
        for j in sel:
            row = nbrs[j, : degs[j]]
            if ni in row:
                continue
            if degs[j] < budget:
                nbrs[j, degs[j]] = ni
                degs[j] += 1
            else:
                cand = np.concatenate([row, [ni]])
                sel2 = _prune_candidates(vectors[: ni + 1], int(j), cand, alpha, budget)
                degs[j] = len(sel2)
                nbrs[j, : len(sel2)] = sel2
        inserted_vec_ids.append(vid)

    if cache is not None:
        for vid in removed_vec_ids:
            cache.evict(vid)

    entry = _protected_entry(vectors, protected)
    graph = NavigableGraph(nbrs, degs, entry)
    _add_chain_edges(vectors, graph.neighbors, graph.degrees, entry, r_cap)
    new = NavGraphSnapshot(snapshot.version + 1, vec_ids, cids, local_pos,
                           protected, vectors, graph, snapshot.bootstrap_size)
    new.inserted = inserted_vec_ids
    new.removed = removed_vec_ids
    return new


def _protected_entry(vectors, protected):
    """Entry point restricted to protected nodes so it survives every refresh."""
    mean = vectors.mean(axis=0, dtype=np.float64).astype(np.float32)
    idx = np.flatnonzero(protected)
    if idx.size == 0:
        idx = np.arange(len(vectors))
    d = kernels.l2sq_batch(mean, vectors[idx])
    return int(idx[np.argmin(d)])


# ---------------------------------------------------------------------------
# manager: publication, reclamation, worker registry
# ---------------------------------------------------------------------------


class _SnapState:
    __slots__ = ("inflight", "reclaimed")

    def __init__(self):
        self.inflight = 0
        self.reclaimed = False


class GraphAbstraction:
    """Owns the current snapshot pointer, worker sketches, and refreshes.

    Readers call acquire()/release(); the single background updater
    clones, patches, and publishes by swapping the current reference.
    A snapshot is reclaimed when a newer version exists and its
    in-flight count has dropped to zero.
    """

    def __init__(self, snapshot, store, part, h, cache_budget=64 * 1024 * 1024,
                 cms_width=2048, cms_depth=4, alpha=1.2):
        self._lock = threading.Lock()
        self._current = snapshot
        self._states = {snapshot.version: _SnapState()}
        self._live = {snapshot.version: snapshot}
        self.store = store
        self.part = part
        self.h = h
        self.alpha = alpha
        self.cache = HotVectorCache(cache_budget)
        self.cms_width = cms_width
        self.cms_depth = cms_depth
        self._workers = []
        self.epoch_events = []
        self._precision_sum = 0.0
        self._precision_n = 0
        self.use_after_reclaim = 0

    # -- snapshot lifecycle ------------------------------------------------

    @property
    def version(self):
        return self._current.version

    def acquire(self):
        with self._lock:
            snap = self._current
            state = self._states[snap.version]
            if state.reclaimed:
                self.use_after_reclaim += 1
            state.inflight += 1
            return snap

    def release(self, snap):
        with self._lock:
            state = self._states.get(snap.version)
            if state is None:
                self.use_after_reclaim += 1
                return
            if state.reclaimed:
                self.use_after_reclaim += 1
            state.inflight -= 1
            self._maybe_reclaim(snap.version)

    def _maybe_reclaim(self, version):
        state = self._states.get(version)
        if (state is not None and state.inflight == 0
                and version != self._current.version):
            state.reclaimed = True
            self._live.pop(version, None)

    # -- workers -------------------------------------------------------------

    def register_worker(self, seed=0):
        w = WorkerStats(CountMinSketch(self.cms_width, self.cms_depth, seed))
        with self._lock:
            self._workers.append(w)
        return w

    def note_precision(self, value):
        with self._lock:
            self._precision_sum += value
            self._precision_n += 1

    # -- refresh -------------------------------------------------------------

    def refresh(self):
        """Harvest worker scores and publish version + 1."""
        with self._lock:
            workers = list(self._workers)
        scores = harvest_scores(workers)
        old = self._current
        new = refresh_ga(old, scores, self.h, self.store, self.part,
                         cache=self.cache, alpha=self.alpha)
        with self._lock:
            prec = self._precision_sum / self._precision_n if self._precision_n else None
            self._precision_sum = 0.0
            self._precision_n = 0
            self._states[new.version] = _SnapState()
            self._live[new.version] = new
            self._current = new
            self._maybe_reclaim(old.version)
            self.epoch_events.append({
                "version": new.version,
                "node_count": new.node_count,
                "inserted": len(new.inserted),
                "removed": len(new.removed),
                "cache_bytes": self.cache.bytes_used,
                "precision_if_gt_available": prec,
            })
        return new
