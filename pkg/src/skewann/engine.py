"""End-to-end query execution with route/access/verify stage accounting.

One query: traverse the GA snapshot for seeds, turn seeds into
per-cluster evidence counts, visit clusters in descending evidence order,
dispatch each to its plan-assigned local index sharing a single top-k
queue (so the pruning threshold tightens across clusters), stop early
after enough consecutive clusters fail to improve the queue, and return
the merged results plus per-stage timing and I/O counters.
"""

from __future__ import annotations

import heapq
import math
import os
import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .local_index import SearchBudget, load_local_index
from .navigation import record_trace, traverse_ga
from .partition import assign_query_clusters
from .profiler import FLAT, GRAPH, IVFFLAT
from .storage import DistanceMetric, FetchTracker


class TopKQueue:
    """Bounded best-k set; the k-th distance is the pruning threshold Dis.

    Stores squared L2 internally; threshold_l2() exposes the square root
    for bound comparisons. Equal distances break toward the lower vector
    id. The threshold is non-increasing for the queue's whole lifetime.
    """

    def __init__(self, k, track_thresholds=False):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.k = k
        self._heap = []  # (-dist_sq, -vid): heap root is the worst entry
        self._members = set()
        self.threshold_log = [] if track_thresholds else None

    def __len__(self):
        return len(self._heap)

    @property
    def kth_sq(self):
        if len(self._heap) < self.k:
            return math.inf
        return -self._heap[0][0]

    def threshold_l2(self):
        return math.sqrt(self.kth_sq)

    def update(self, vid, dist_sq):
        if vid in self._members:
            return False  # rescore of a vector already in the queue
        if len(self._heap) < self.k:
            heapq.heappush(self._heap, (-dist_sq, -vid))
            self._members.add(vid)
            changed = True
        else:
            wd, wv = -self._heap[0][0], -self._heap[0][1]
            if (dist_sq, vid) < (wd, wv):
                _, out = heapq.heappushpop(self._heap, (-dist_sq, -vid))
                self._members.discard(-out)
                self._members.add(vid)
                changed = True
            else:
                changed = False
        if changed and self.threshold_log is not None:
            self.threshold_log.append(self.kth_sq)
        return changed

    def update_batch(self, ids, dists):
        if len(self._heap) < self.k:
            for vid, d in zip(ids, dists):
                self.update(int(vid), float(d))
            return
        # the threshold only shrinks mid-batch, so the batch-start kth is a
        # safe prefilter; survivors go through the exact per-entry check
        cand = np.flatnonzero(dists <= self.kth_sq)
        for i in cand:
            self.update(int(ids[i]), float(dists[i]))

    def content_key(self):
        return frozenset(-v for _, v in self._heap)

    def result(self):
        """Final (vector id, dist_sq) pairs ascending by (dist, id)."""
        out = sorted(((-d, -v) for d, v in self._heap))
        return [(int(v), float(d)) for d, v in out]


@dataclass
class QueryStats:
    query_id: int = -1
    snapshot_version: int = -1
    t_route: float = 0.0
    t_access: dict = field(default_factory=dict)  # cid -> seconds, fetch excluded
    t_fetch: float = 0.0
    clusters_probed: int = 0
    clusters_skipped_by_earlystop: int = 0
    candidates_rejected_by_bound: int = 0
    raw_fetches: int = 0
    pages_touched: int = 0
    cache_hits: int = 0
    latency: float = 0.0
    precision: float = None
    collect_rejections: bool = False
    rejected_ids: list = field(default_factory=list)

    def to_json(self):
        return {
            "query_id": self.query_id,
            "version": self.snapshot_version,
            "t_route": self.t_route,
            "t_access": {str(c): t for c, t in self.t_access.items()},
            "t_access_total": sum(self.t_access.values()),
            "t_fetch": self.t_fetch,
            "clusters_probed": self.clusters_probed,
            "clusters_skipped_by_earlystop": self.clusters_skipped_by_earlystop,
            "candidates_rejected_by_bound": self.candidates_rejected_by_bound,
            "raw_fetches": self.raw_fetches,
            "pages_touched": self.pages_touched,
            "cache_hits": self.cache_hits,
            "latency": self.latency,
            "precision": self.precision,
        }


class FetchContext:
    """Raw-vector access for one query: hot-cache consult, then counted fetch."""

    def __init__(self, store, cache=None, stats=None):
        self.store = store
        self.cache = cache
        self.stats = stats
        self.tracker = FetchTracker()
        self.t_fetch = 0.0

    def get_vector(self, vid):
        if self.cache is not None:
            vec = self.cache.get(vid)
            if vec is not None:
                if self.stats is not None:
                    self.stats.cache_hits += 1
                return vec
        t0 = time.perf_counter()
        vec = self.store.fetch(vid, self.tracker)
        self.t_fetch += time.perf_counter() - t0
        return vec

    def get_vectors(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if self.cache is None or not self.cache._entries:
            t0 = time.perf_counter()
            block = self.store.fetch_block(ids, self.tracker)
            self.t_fetch += time.perf_counter() - t0
            return block
        out = None
        miss_pos, miss_ids = [], []
        for pos, vid in enumerate(ids):
            vec = self.cache.get(int(vid))
            if vec is None:
                miss_pos.append(pos)
                miss_ids.append(int(vid))
            else:
                if out is None:
                    out = np.empty((len(ids), self.store.dim), dtype=vec.dtype)
                if self.stats is not None:
                    self.stats.cache_hits += 1
                out[pos] = vec
        if out is None:
            t0 = time.perf_counter()
            block = self.store.fetch_block(ids, self.tracker)
            self.t_fetch += time.perf_counter() - t0
            return block
        if miss_ids:
            t0 = time.perf_counter()
            block = self.store.fetch_block(np.array(miss_ids), self.tracker)
            self.t_fetch += time.perf_counter() - t0
            out[miss_pos] = block
        return out

    def finalize(self):
        if self.stats is not None:
            self.stats.raw_fetches += self.tracker.fetches
            self.stats.pages_touched += self.tracker.pages_touched
            self.stats.t_fetch += self.t_fetch


@dataclass
class EarlyStopPolicy:
    """Stop after n = ceil(rho * M) consecutive non-improving clusters."""

    rho: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("rho must be in (0, 1]")

    def patience(self, m):
        return max(1, math.ceil(self.rho * m))


@dataclass
class QueryConfig:
    k: int = 10
    nprobe: int = 0          # 0 -> 4k
    rho: float = 0.2
    beam_l: int = 0          # graph-search queue capacity; 0 -> max(64, 2k)
    max_hops: int = 0        # 0 -> unbounded
    local_nprobe: int = 8    # IVF lists probed per cluster; 0 -> all
    reorder: bool = True
    earlystop: bool = True
    pruning: bool = True
    ga_refresh: bool = True
    min_clusters: int = 0
    delta_q: int = 1000
    workers: int = 0         # 0 -> cpu count, capped at 48

    def resolved_nprobe(self):
        return self.nprobe if self.nprobe > 0 else 4 * self.k

    def resolved_beam(self):
        return self.beam_l if self.beam_l > 0 else max(64, 2 * self.k)

    def resolved_workers(self):
        if self.workers > 0:
            return self.workers
        return min(os.cpu_count() or 1, 48)


class Deployment:
    """Immutable serving state: store + partition + plan + local indices."""

    def __init__(self, store, part, plan, index_dir, metric=None,
                 verify_fraction=0.01):
        self.store = store
        self.part = part
        self.plan = plan
        self.index_dir = index_dir
        self.metric = metric or DistanceMetric("l2")
        self.verify_fraction = verify_fraction
        self._indices = {}
        self._lock = threading.Lock()

    def index_path(self, cid):
        return os.path.join(self.index_dir, f"cluster_{cid}.idx")

    def index_for(self, cid):
        with self._lock:
            idx = self._indices.get(cid)
        if idx is not None:
            return idx
        idx = load_local_index(self.index_path(cid), self.part, store=self.store,
                               verify_fraction=self.verify_fraction)
        with self._lock:
            return self._indices.setdefault(cid, idx)


def execute_query(deploy, snapshot, q, config, cache=None, query_id=-1,
                  gt_clusters=None, collect_rejections=False,
                  track_thresholds=False):
    """Run one query; returns (result pairs, QueryStats, VisitTraces)."""
    t_start = time.perf_counter()
    q = np.ascontiguousarray(q, dtype=np.float32)
    stats = QueryStats(query_id=query_id, snapshot_version=snapshot.version,
                       collect_rejections=collect_rejections)
    topk = TopKQueue(config.k, track_thresholds=track_thresholds)
    ctx = FetchContext(deploy.store, cache, stats)
    pruning = config.pruning and deploy.metric.supports_pruning

    t0 = time.perf_counter()
    seeds = traverse_ga(snapshot, q, config.resolved_nprobe())
    stats.t_route = time.perf_counter() - t0

    # evidence: CP[c] = seed count, seed[c] = nearest seed mapping into c
    cp, best_seed, first_order = {}, {}, []
    for s in seeds:
        if s.cid not in cp:
            cp[s.cid] = 0
            first_order.append(s.cid)
        cp[s.cid] += 1
        cur = best_seed.get(s.cid)
        if cur is None or (s.dist, s.vector_id) < (cur.dist, cur.vector_id):
            best_seed[s.cid] = s
        if s.vector_id >= 0:
            # sample-node seeds are scored dataset vectors: enter them now
            # so the pruning threshold is tight before the first fetch
            topk.update(s.vector_id, s.dist)

    if config.reorder:
        order = sorted(cp, key=lambda c: (-cp[c], best_seed[c].dist, c))
    else:
        order = first_order
    if config.min_clusters > len(order):
        for c in assign_query_clusters(deploy.part, q, config.min_clusters):
            c = int(c)
            if c not in cp:
                order.append(c)
                cp[c] = 0

    m = len(order)
    patience = EarlyStopPolicy(config.rho).patience(m)
    budget = SearchBudget(config.resolved_beam(), config.max_hops, pruning)
    traces = []
    fails = 0
    for pos, cid in enumerate(order):
        idx = deploy.index_for(cid)
        itype = idx.index_type
        dq_ct = None
        if pruning and itype in (FLAT, IVFFLAT):
            dq_ct = math.sqrt(kernels.l2sq_pair(q, np.ascontiguousarray(
                deploy.part.centroids[cid], dtype=np.float32)))
        pre_key = topk.content_key()
        fetch_before = ctx.t_fetch
        t_c = time.perf_counter()
        if itype == FLAT:
            tr = idx.search(q, topk, ctx, pruning=pruning,
                            dist_q_centroid=dq_ct, stats=stats)
        elif itype == GRAPH:
            seed = best_seed.get(cid)
            seed_local = seed.local_pos if seed is not None and seed.local_pos >= 0 else None
            tr = idx.search(q, topk, ctx, budget, seed_local=seed_local, stats=stats)
        else:
            tr = idx.search(q, topk, ctx, config.local_nprobe, pruning=pruning,
                            dist_q_centroid=dq_ct, stats=stats)
        stats.t_access[cid] = (time.perf_counter() - t_c) - (ctx.t_fetch - fetch_before)
        stats.clusters_probed += 1
        traces.append(tr)
        fails = 0 if topk.content_key() != pre_key else fails + 1
        if config.earlystop and fails >= patience and pos + 1 < m:
            stats.clusters_skipped_by_earlystop = m - (pos + 1)
            break

    results = topk.result()
    ctx.finalize()
    if gt_clusters is not None and stats.clusters_probed:
        probed = set(order[: stats.clusters_probed])
        stats.precision = len(probed & gt_clusters) / len(probed)
    stats.latency = time.perf_counter() - t_start
    return results, stats, traces


def gt_cluster_sets(part, gt_ids, k):
    """Per-query set of clusters holding at least one true k-NN."""
    return [set(int(c) for c in part.assignment[row[:k]]) for row in gt_ids]


def evaluate_recall(result_ids, gt_ids, k):
    """Mean over queries of |returned  intersect  GT_k| / k."""
    if len(result_ids) != len(gt_ids):
        raise ValueError("result and ground-truth query counts differ")
    total = 0.0
    for res, gt in zip(result_ids, gt_ids):
        if len(gt) < k:
            raise ValueError(f"ground truth has only {len(gt)} < k={k} entries")
        total += len(set(int(i) for i in res[:k]) & set(int(i) for i in gt[:k])) / k
    return total / len(result_ids) if len(result_ids) else 0.0


def run_epoch_loop(deploy, ga, queries, config, gt_clusters=None,
                   collect_rejections=False):
    """Serve a query stream with epoch-based GA refresh.

    After every delta_q completed queries one refresh is spawned on a
    background thread (queries never block on it); each query records the
    snapshot version it ran against. Returns (results, stats_list,
    epoch_events) with results ordered by query id.
    """
    n = len(queries)
    results = [None] * n
    stats_out = [None] * n
    completed = 0
    count_lock = threading.Lock()
    refresh_q = queue.Queue()
    stop = object()

    def refresher():
        while True:
            item = refresh_q.get()
            if item is stop:
                return
            ga.refresh()

    refresh_thread = None
    if config.ga_refresh:
        refresh_thread = threading.Thread(target=refresher, daemon=True)
        refresh_thread.start()

    tls = threading.local()

    def worker_stats():
        ws = getattr(tls, "ws", None)
        if ws is None:
            ws = ga.register_worker(seed=threading.get_ident() & 0x7FFFFFFF)
            tls.ws = ws
        return ws

    def run_one(qid):
        nonlocal completed
        snap = ga.acquire()
        try:
            gtc = gt_clusters[qid] if gt_clusters is not None else None
            res, stats, traces = execute_query(
                deploy, snap, queries[qid], config, cache=ga.cache,
                query_id=qid, gt_clusters=gtc,
                collect_rejections=collect_rejections)
            if config.ga_refresh:
                ws = worker_stats()
                top_ids = set(v for v, _ in res)
                for tr in traces:
                    record_trace(ws, tr, top_ids)
            if stats.precision is not None:
                ga.note_precision(stats.precision)
        finally:
            ga.release(snap)
        results[qid] = res
        stats_out[qid] = stats
        with count_lock:
            completed += 1
            boundary = config.ga_refresh and completed % config.delta_q == 0
        if boundary:
            refresh_q.put(None)

    workers = config.resolved_workers()
    if workers == 1:
        for qid in range(n):
            run_one(qid)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_one, range(n)))

    if refresh_thread is not None:
        refresh_q.put(stop)
        refresh_thread.join()
    return results, stats_out, list(ga.epoch_events)
