import math

import numpy as np
import pytest

from skewann import datagen
from skewann.engine import FetchContext, QueryStats, TopKQueue
from skewann.local_index import (BuildParams, SearchBudget, build_local_index,
                                 load_local_index)
from skewann.partition import kmeans_partition
from skewann.profiler import FLAT, GRAPH, IVFFLAT
from skewann.storage import VectorStore, write_vecs


def make_fixture(tmp_path, data, k, seed=0, name="li"):
    path = tmp_path / f"{name}.fvecs"
    write_vecs(path, np.asarray(data, dtype=np.float32))
    store = VectorStore.open(str(path))
    part = kmeans_partition(store, k, seed=seed)
    return store, part


def build_and_load(tmp_path, store, part, cid, itype, params=None, name="c"):
    path = tmp_path / f"{name}_{cid}.idx"
    build_local_index(store, part, cid, itype, str(path), params)
    return load_local_index(str(path), part, store=store)


def brute_topk(data, member_ids, q, k):
    d = ((data[member_ids].astype(np.float64) - np.asarray(q, np.float64)) ** 2).sum(1)
    order = np.lexsort((member_ids, d))[:k]
    return [int(member_ids[i]) for i in order]


def test_flat_single_vector_cluster(tmp_path):
    data = np.array([[0.0, 0.0], [100.0, 100.0]], dtype=np.float32)
    store, part = make_fixture(tmp_path, data, 2)
    cid = int(part.assignment[0])
    idx = build_and_load(tmp_path, store, part, cid, FLAT)
    assert idx.count == 1
    assert list(idx.member_ids) == [0] or list(idx.member_ids) == [1]


def test_flat_scan_without_pruning_fetches_all(tmp_path):
    rng = np.random.default_rng(0)
    store, part = make_fixture(tmp_path, rng.standard_normal((200, 8)), 1)
    idx = build_and_load(tmp_path, store, part, 0, FLAT)
    topk = TopKQueue(5)
    stats = QueryStats()
    ctx = FetchContext(store, None, stats)
    store.reset_counters()
    idx.search(rng.standard_normal(8).astype(np.float32), topk, ctx, pruning=False,
               stats=stats)
    assert store.fetch_counter == 200
    ctx.finalize()
    assert stats.raw_fetches == 200


def test_flat_pruning_matches_exhaustive(tmp_path):
    rng = np.random.default_rng(1)
    data = rng.standard_normal((500, 16)).astype(np.float32)
    store, part = make_fixture(tmp_path, data, 1)
    idx = build_and_load(tmp_path, store, part, 0, FLAT)
    for t in range(5):
        q = rng.standard_normal(16).astype(np.float32)
        res = {}
        for pruning in (False, True):
            topk = TopKQueue(10)
            idx.search(q, topk, FetchContext(store), pruning=pruning)
            res[pruning] = topk.result()
        assert res[True] == res[False]
        assert [v for v, _ in res[True]] == brute_topk(data, np.arange(500), q, 10)


def test_flat_pivot_bound_keep_and_reject(tmp_path):
    """Planted pivot geometry: Dis=5, d(q,p)=10, candidates at 6 and 4.

    The candidate whose pivot distance is 6 has bound |10-6| = 4 < 5 and
    must be fetched; the one at 4 has bound |10-4| = 6 > 5 and must be
    rejected without a fetch.
    """
    data = np.array([[4.0], [14.0], [50.0]], dtype=np.float32)
    path = tmp_path / "fig.fvecs"
    write_vecs(path, data)
    store = VectorStore.open(str(path))
    part = kmeans_partition(store, 2, seed=0)
    # cluster holding {4, 14}: force its centroid to act as pivot p = 10
    cid = int(part.assignment[0])
    assert part.assignment[1] == cid
    part.centroids[cid] = np.array([10.0], dtype=np.float32)
    part.centroid_dist[0] = abs(4.0 - 10.0)    # d(v0, p) = 6
    part.centroid_dist[1] = abs(14.0 - 10.0)   # d(v1, p) = 4
    idx_path = tmp_path / "fig.idx"
    build_local_index(store, part, cid, FLAT, str(idx_path))
    idx = load_local_index(str(idx_path), part, store=store)

    topk = TopKQueue(1)
    topk.update(99, 25.0)  # prior candidate at true distance 5 -> Dis = 5
    stats = QueryStats(collect_rejections=True)
    ctx = FetchContext(store, None, stats)
    store.reset_counters()
    q = np.array([0.0], dtype=np.float32)  # d(q, p) = 10
    idx.search(q, topk, ctx, pruning=True, stats=stats)
    # v0 (pivot dist 6, LB 4): fetched and wins; v1 (pivot dist 4, LB 6): rejected
    assert store.fetch_counter == 1
    assert stats.candidates_rejected_by_bound == 1
    assert stats.rejected_ids == [1]
    assert topk.result()[0][0] == 0


# -- graph ---------------------------------------------------------------------


def test_graph_build_invariants(tmp_path):
    rng = np.random.default_rng(2)
    data = rng.standard_normal((100, 8)).astype(np.float32)
    store, part = make_fixture(tmp_path, data, 1)
    params = BuildParams(r=8, l_build=32)
    idx = build_and_load(tmp_path, store, part, 0, GRAPH, params)
    degrees = np.diff(idx.offsets)
    assert degrees.max() <= 8
    # full edge-distance verification (the loader spot-checks 1%)
    idx.verify_edges(store, fraction=1.0)
    # connectivity from the entry point
    seen = {idx.entry_point}
    stack = [idx.entry_point]
    while stack:
        c = stack.pop()
        for nbr in idx.neighbor_row(c)["nbr"]:
            if int(nbr) not in seen:
                seen.add(int(nbr))
                stack.append(int(nbr))
    assert len(seen) == 100


def test_graph_finds_planted_duplicate(tmp_path):
    rng = np.random.default_rng(3)
    data = rng.standard_normal((200, 12)).astype(np.float32)
    store, part = make_fixture(tmp_path, data, 1)
    idx = build_and_load(tmp_path, store, part, 0, GRAPH, BuildParams(r=8, l_build=32))
    q = data[137].copy()
    topk = TopKQueue(1)
    budget = SearchBudget(64, 0, True)
    idx.search(q, topk, FetchContext(store), budget)
    (vid, dist), = topk.result()
    assert vid == 137
    assert dist == 0.0


def test_graph_single_node(tmp_path):
    data = np.array([[1.0, 2.0], [50.0, 50.0]], dtype=np.float32)
    store, part = make_fixture(tmp_path, data, 2)
    cid = int(part.assignment[0])
    idx = build_and_load(tmp_path, store, part, cid, GRAPH)
    topk = TopKQueue(1)
    tr = idx.search(np.zeros(2, np.float32), topk, FetchContext(store),
                    SearchBudget(8, 0, True))
    assert [v for v, _ in topk.result()] == [0]
    assert tr.depth_max == 1
    assert list(tr.ids) == [0]


def test_graph_skipped_nodes_are_safe(tmp_path):
    """Every node skipped without a fetch is truly worse than the k-th result."""
    rng = np.random.default_rng(4)
    data = rng.standard_normal((1000, 16)).astype(np.float32)
    store, part = make_fixture(tmp_path, data, 1)
    idx = build_and_load(tmp_path, store, part, 0, GRAPH, BuildParams(r=12, l_build=48))
    for t in range(10):
        q = rng.standard_normal(16).astype(np.float32)
        topk = TopKQueue(10)
        stats = QueryStats(collect_rejections=True)
        ctx = FetchContext(store, None, stats)
        idx.search(q, topk, ctx, SearchBudget(64, 0, True), stats=stats)
        kth = math.sqrt(topk.kth_sq)
        for vid in stats.rejected_ids:
            true = math.sqrt(((data[vid].astype(np.float64) - q) ** 2).sum())
            assert true > kth - 1e-5


def test_graph_trace_depths(tmp_path):
    rng = np.random.default_rng(5)
    data = rng.standard_normal((50, 6)).astype(np.float32)
    store, part = make_fixture(tmp_path, data, 1)
    idx = build_and_load(tmp_path, store, part, 0, GRAPH, BuildParams(r=6, l_build=16))
    topk = TopKQueue(5)
    tr = idx.search(rng.standard_normal(6).astype(np.float32), topk,
                    FetchContext(store), SearchBudget(16, 0, True))
    assert tr.kind == "graph"
    assert list(tr.depths) == list(range(1, tr.depth_max + 1))
    assert len(tr.ids) == tr.depth_max


def test_graph_invalid_seed(tmp_path):
    rng = np.random.default_rng(6)
    store, part = make_fixture(tmp_path, rng.standard_normal((20, 4)), 1)
    idx = build_and_load(tmp_path, store, part, 0, GRAPH, BuildParams(r=4, l_build=8))
    with pytest.raises(ValueError):
        idx.search(np.zeros(4, np.float32), TopKQueue(1), FetchContext(store),
                   SearchBudget(8, 0, True), seed_local=99)


# -- ivf-flat --------------------------------------------------------------------


def test_ivf_nlist_follows_rule(tmp_path):
    rng = np.random.default_rng(7)
    data = rng.standard_normal((2500, 8)).astype(np.float32)
    store, part = make_fixture(tmp_path, data, 1)
    idx = build_and_load(tmp_path, store, part, 0, IVFFLAT)
    assert idx.nlist == 50  # floor(sqrt(2500))
    lens = np.diff(idx.list_offsets)
    assert lens.sum() == 2500
    assert lens.min() >= 1


def test_ivf_full_probe_matches_flat(tmp_path):
    rng = np.random.default_rng(8)
    data = rng.standard_normal((600, 10)).astype(np.float32)
    store, part = make_fixture(tmp_path, data, 1)
    flat = build_and_load(tmp_path, store, part, 0, FLAT, name="f")
    ivf = build_and_load(tmp_path, store, part, 0, IVFFLAT, name="i")
    for t in range(5):
        q = rng.standard_normal(10).astype(np.float32)
        tk_f, tk_i = TopKQueue(10), TopKQueue(10)
        flat.search(q, tk_f, FetchContext(store), pruning=False)
        ivf.search(q, tk_i, FetchContext(store), ivf.nlist, pruning=False)
        assert tk_f.result() == tk_i.result()


def test_ivf_pruning_reduces_fetches_same_topk(tmp_path):
    rng = np.random.default_rng(9)
    data = rng.standard_normal((800, 12)).astype(np.float32)
    store, part = make_fixture(tmp_path, data, 1)
    ivf = build_and_load(tmp_path, store, part, 0, IVFFLAT)
    q = rng.standard_normal(12).astype(np.float32)
    out = {}
    for pruning in (False, True):
        topk = TopKQueue(10)
        stats = QueryStats()
        ctx = FetchContext(store, None, stats)
        ivf.search(q, topk, ctx, ivf.nlist, pruning=pruning, stats=stats)
        ctx.finalize()
        out[pruning] = (topk.result(), stats.raw_fetches)
    assert out[True][0] == out[False][0]
    assert out[True][1] <= out[False][1]


def test_ivf_local_nprobe_one_hits_only_near_list(tmp_path):
    rng = np.random.default_rng(10)
    blob_a = rng.standard_normal((60, 4)) * 0.05
    blob_b = rng.standard_normal((60, 4)) * 0.05 + 60.0
    data = np.vstack([blob_a, blob_b]).astype(np.float32)
    store, part = make_fixture(tmp_path, data, 1)
    ivf = build_and_load(tmp_path, store, part, 0, IVFFLAT,
                         BuildParams(nlist_max=4, sub_kmeans_iters=20))
    assert ivf.nlist == 4  # the rule floors nlist at 4
    q = np.zeros(4, dtype=np.float32)  # inside blob A
    topk = TopKQueue(5)
    tr = ivf.search(q, topk, FetchContext(store), 1, pruning=False)
    assert set(tr.ids) <= set(range(60))  # only blob-A members scanned


def test_ivf_seeded_threshold_prunes_harder(tmp_path):
    """A converged Dis carried in from a prior cluster cuts fetches further."""
    rng = np.random.default_rng(11)
    data = (rng.standard_normal((10_000, 16)) * 2.0).astype(np.float32)
    store, part = make_fixture(tmp_path, data, 1)
    flat = build_and_load(tmp_path, store, part, 0, FLAT)
    q = rng.standard_normal(16).astype(np.float32)
    base = brute_topk(data, np.arange(10_000), q, 10)

    cold = TopKQueue(10)
    s_cold = QueryStats()
    flat.search(q, cold, FetchContext(store, None, s_cold), pruning=True, stats=s_cold)

    # converged Dis carried over from a "prior cluster": foreign ids at
    # marginally worse distances, all displaced by this cluster's true top-k
    seeded = TopKQueue(10)
    for i, vid in enumerate(base):
        d = float(((data[vid].astype(np.float64) - q) ** 2).sum())
        seeded.update(1_000_000 + i, d * 1.02)
    s_hot = QueryStats()
    flat.search(q, seeded, FetchContext(store, None, s_hot), pruning=True, stats=s_hot)
    assert s_hot.candidates_rejected_by_bound > s_cold.candidates_rejected_by_bound
    assert [v for v, _ in seeded.result()] == base


def test_header_count_must_match_partition(tmp_path):
    rng = np.random.default_rng(12)
    data = rng.standard_normal((100, 4)).astype(np.float32)
    store, part = make_fixture(tmp_path, data, 2)
    path = tmp_path / "c0.idx"
    build_local_index(store, part, 0, FLAT, str(path))
    part.members[0] = part.members[0][:-1]  # simulate a mismatched partition
    with pytest.raises(ValueError):
        load_local_index(str(path), part)
