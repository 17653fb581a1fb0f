"""Hot numeric kernels: distances, k-means assignment, bound masks, graph build.

Two interchangeable backends share every function signature here:

* ``numba`` -- @njit compiled loops (the default whenever numba imports),
* ``numpy`` -- pure-numpy/python fallback.

Select with the environment variable ``SKEWANN_BACKEND=numba|numpy``
(read once at import). Both backends are importable side by side as
``numba_backend`` / ``numpy_backend`` so benchmarks can compare them in
one process; the module-level names dispatch to the active one.

All distance kernels take float32 data and accumulate in float64, so the
two backends agree to ~1e-13 relative and near-ties are not
backend-dependent in practice. Bitwise identity across backends is not
promised (summation strategies differ); within a backend every kernel is
deterministic.
"""

from __future__ import annotations

import heapq
import os
from types import SimpleNamespace

import numpy as np


def _pick_backend() -> str:
    choice = os.environ.get("SKEWANN_BACKEND", "").strip().lower()
    if choice not in ("", "numba", "numpy"):
        raise ValueError(f"SKEWANN_BACKEND must be 'numba' or 'numpy', got {choice!r}")
    if choice == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if choice == "numba":
            raise
        return "numpy"
    return "numba"


BACKEND = _pick_backend()
USE_NUMBA = BACKEND == "numba"


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------

def _np_l2sq_pair(a, b):
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.dot(d, d))


def _np_l2sq_batch(q, X):
    d = X.astype(np.float64) - q.astype(np.float64)
    return np.einsum("ij,ij->i", d, d)


def _np_ip_dist_batch(q, X):
    return -(X.astype(np.float64) @ q.astype(np.float64))


def _np_assign_chunk(X, C):
    """Nearest centroid per row; ties break toward the lower centroid id."""
    X64 = X.astype(np.float64)
    C64 = C.astype(np.float64)
    d2 = (
        np.einsum("ij,ij->i", X64, X64)[:, None]
        - 2.0 * (X64 @ C64.T)
        + np.einsum("ij,ij->i", C64, C64)[None, :]
    )
    assign = np.argmin(d2, axis=1).astype(np.int32)
    best = d2[np.arange(len(X64)), assign]
    # the expansion above can go slightly negative for exact matches
    return assign, np.maximum(best, 0.0)


def _np_lb_exceeds(dist_qp, pivot_dists, threshold):
    return np.abs(dist_qp - pivot_dists.astype(np.float64)) > threshold


def _py_greedy_search(vecs, nbrs, degs, entry, q, L):
    """Best-first beam search over a padded adjacency graph.

    Returns (beam_ids, beam_dists, pool_ids, pool_dists): the beam sorted
    ascending by (dist, id), plus every scored node in scoring order.
    """
    n = vecs.shape[0]
    visited = np.zeros(n, dtype=bool)
    d0 = _np_l2sq_pair(q, vecs[entry])
    visited[entry] = True
    pool_ids = [entry]
    pool_dists = [d0]
    cand = [(d0, entry)]
    beam = [(-d0, -entry)]  # max-heap on (dist, id); lower id survives ties
    while cand:
        d, c = heapq.heappop(cand)
        wd, wi = beam[0]
        if len(beam) == L and (d, c) > (-wd, -wi):
            break
        nb = nbrs[c, : degs[c]]
        nb = nb[~visited[nb]]
        if nb.size == 0:
            continue
        visited[nb] = True
        dists = _np_l2sq_batch(q, vecs[nb])
        for j, dn in zip(nb, dists):
            pool_ids.append(int(j))
            pool_dists.append(float(dn))
            wd, wi = beam[0]
            if len(beam) < L or (dn, j) < (-wd, -wi):
                heapq.heappush(beam, (-dn, -int(j)))
                if len(beam) > L:
                    heapq.heappop(beam)
                heapq.heappush(cand, (dn, int(j)))
    out = sorted((-d, -i) for d, i in beam)
    beam_ids = np.array([i for _, i in out], dtype=np.int32)
    beam_dists = np.array([d for d, _ in out], dtype=np.float64)
    return (
        beam_ids,
        beam_dists,
        np.array(pool_ids, dtype=np.int32),
        np.array(pool_dists, dtype=np.float64),
    )


def _py_robust_prune(vecs, node, cand_ids, cand_dists, alpha, r_budget):
    """Vamana-style pruning of a candidate pool to at most r_budget edges."""
    order = np.lexsort((cand_ids, cand_dists))
    ids = cand_ids[order]
    dists = cand_dists[order]
    alive = np.ones(len(ids), dtype=bool)
    alive[ids == node] = False
    # drop duplicate ids, keeping the first (nearest) occurrence
    seen = set()
    for i, v in enumerate(ids):
        if v in seen:
            alive[i] = False
        seen.add(int(v))
    selected = []
    for i in range(len(ids)):
        if not alive[i]:
            continue
        p = int(ids[i])
        selected.append(p)
        if len(selected) == r_budget:
            break
        alive[i] = False
        rest = np.flatnonzero(alive)
        if rest.size:
            d_p = _np_l2sq_batch(vecs[p], vecs[ids[rest]])
            alive[rest[alpha * alpha * d_p <= dists[rest]]] = False
    return np.array(selected, dtype=np.int32)


def _py_build_graph(vecs, init_nbrs, init_degs, entry, order, L, alpha, r_budget):
    """Two refinement passes (alpha=1 then alpha) over a random-init graph."""
    nbrs = init_nbrs.copy()
    degs = init_degs.copy()

    def reprune(j, extra):
        pool = np.concatenate([nbrs[j, : degs[j]], np.array(extra, dtype=np.int32)])
        d = _np_l2sq_batch(vecs[j], vecs[pool])
        sel = _py_robust_prune(vecs, j, pool, d, a, r_budget)
        degs[j] = len(sel)
        nbrs[j, : len(sel)] = sel

    for a in (1.0, alpha):
        for i in order:
            _, _, pool_ids, pool_dists = _py_greedy_search(vecs, nbrs, degs, entry, vecs[i], L)
            pool_ids = np.concatenate([pool_ids, nbrs[i, : degs[i]]])
            pool_dists = np.concatenate(
                [pool_dists, _np_l2sq_batch(vecs[i], vecs[nbrs[i, : degs[i]]])]
            )
            sel = _py_robust_prune(vecs, i, pool_ids, pool_dists, a, r_budget)
            degs[i] = len(sel)
            nbrs[i, : len(sel)] = sel
            for j in sel:
                row = nbrs[j, : degs[j]]
                if i in row:
                    continue
                if degs[j] < r_budget:
                    nbrs[j, degs[j]] = i
                    degs[j] += 1
                else:
                    reprune(int(j), [i])
    return nbrs, degs


numpy_backend = SimpleNamespace(
    l2sq_pair=_np_l2sq_pair,
    l2sq_batch=_np_l2sq_batch,
    ip_dist_batch=_np_ip_dist_batch,
    assign_chunk=_np_assign_chunk,
    lb_exceeds=_np_lb_exceeds,
    greedy_search=_py_greedy_search,
    build_graph=_py_build_graph,
)


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

numba_backend = None

if BACKEND == "numba":
    from numba import njit

    @njit(cache=True, nogil=True)
    def _nb_l2sq_pair(a, b):
        s = 0.0
        for i in range(a.shape[0]):
            d = np.float64(a[i]) - np.float64(b[i])
            s += d * d
        return s

    @njit(cache=True, nogil=True)
    def _nb_l2sq_batch(q, X):
        n = X.shape[0]
        out = np.empty(n, np.float64)
        for i in range(n):
            s = 0.0
            for j in range(X.shape[1]):
                d = np.float64(X[i, j]) - np.float64(q[j])
                s += d * d
            out[i] = s
        return out

    @njit(cache=True, nogil=True)
    def _nb_ip_dist_batch(q, X):
        n = X.shape[0]
        out = np.empty(n, np.float64)
        for i in range(n):
            s = 0.0
            for j in range(X.shape[1]):
                s += np.float64(X[i, j]) * np.float64(q[j])
            out[i] = -s
        return out

    @njit(cache=True, nogil=True)
    def _nb_assign_chunk(X, C):
        n, d = X.shape
        k = C.shape[0]
        assign = np.empty(n, np.int32)
        best = np.empty(n, np.float64)
        for i in range(n):
            bd = np.inf
            bj = -1
            for j in range(k):
                s = 0.0
                for t in range(d):
                    dv = np.float64(X[i, t]) - np.float64(C[j, t])
                    s += dv * dv
                if s < bd:
                    bd = s
                    bj = j
            assign[i] = bj
            best[i] = bd
        return assign, best

    @njit(cache=True, nogil=True)
    def _nb_lb_exceeds(dist_qp, pivot_dists, threshold):
        n = pivot_dists.shape[0]
        out = np.empty(n, np.bool_)
        for i in range(n):
            out[i] = abs(dist_qp - np.float64(pivot_dists[i])) > threshold
        return out

    @njit(cache=True, nogil=True)
    def _nb_greedy_search(vecs, nbrs, degs, entry, q, L):
        n = vecs.shape[0]
        visited = np.zeros(n, np.bool_)
        # beam: ascending insertion-sorted arrays of (dist, id), size <= L
        bd = np.empty(L, np.float64)
        bi = np.empty(L, np.int32)
        bsize = 0
        # candidate min-heap keyed by (dist, id)
        hd = np.empty(n + 1, np.float64)
        hi = np.empty(n + 1, np.int32)
        hsize = 0
        pool_ids = np.empty(n, np.int32)
        pool_dists = np.empty(n, np.float64)
        pool_n = 0

        d0 = _nb_l2sq_pair(q, vecs[entry])
        visited[entry] = True
        pool_ids[0] = entry
        pool_dists[0] = d0
        pool_n = 1
        bd[0] = d0
        bi[0] = entry
        bsize = 1
        hd[0] = d0
        hi[0] = entry
        hsize = 1

        while hsize > 0:
            # pop heap min
            d = hd[0]
            c = hi[0]
            hsize -= 1
            hd[0] = hd[hsize]
            hi[0] = hi[hsize]
            pos = 0
            while True:
                l = 2 * pos + 1
                r = l + 1
                sm = pos
                if l < hsize and (hd[l] < hd[sm] or (hd[l] == hd[sm] and hi[l] < hi[sm])):
                    sm = l
                if r < hsize and (hd[r] < hd[sm] or (hd[r] == hd[sm] and hi[r] < hi[sm])):
                    sm = r
                if sm == pos:
                    break
                hd[pos], hd[sm] = hd[sm], hd[pos]
                hi[pos], hi[sm] = hi[sm], hi[pos]
                pos = sm

            if bsize == L:
                wd = bd[bsize - 1]
                wi = bi[bsize - 1]
                if d > wd or (d == wd and c > wi):
                    break

            for e in range(degs[c]):
                j = nbrs[c, e]
                if visited[j]:
                    continue
                visited[j] = True
                dn = _nb_l2sq_pair(q, vecs[j])
                pool_ids[pool_n] = j
                pool_dists[pool_n] = dn
                pool_n += 1
                enter = bsize < L
                if not enter:
                    wd = bd[bsize - 1]
                    wi = bi[bsize - 1]
                    enter = dn < wd or (dn == wd and j < wi)
                if enter:
                    # insertion into sorted beam
                    p = bsize if bsize < L else L - 1
                    while p > 0 and (bd[p - 1] > dn or (bd[p - 1] == dn and bi[p - 1] > j)):
                        if p < L:
                            bd[p] = bd[p - 1]
                            bi[p] = bi[p - 1]
                        p -= 1
                    bd[p] = dn
                    bi[p] = j
                    if bsize < L:
                        bsize += 1
                    # heap push
                    hd[hsize] = dn
                    hi[hsize] = j
                    pos = hsize
                    hsize += 1
                    while pos > 0:
                        par = (pos - 1) // 2
                        if hd[pos] < hd[par] or (hd[pos] == hd[par] and hi[pos] < hi[par]):
                            hd[pos], hd[par] = hd[par], hd[pos]
                            hi[pos], hi[par] = hi[par], hi[pos]
                            pos = par
                        else:
                            break
        return bd[:bsize].copy(), bi[:bsize].copy(), pool_ids[:pool_n], pool_dists[:pool_n]

    def _nb_greedy_search_wrap(vecs, nbrs, degs, entry, q, L):
        bd, bi, pi, pd = _nb_greedy_search(vecs, nbrs, degs, np.int32(entry), q, L)
        return bi, bd, pi, pd

    @njit(cache=True, nogil=True)
    def _nb_robust_prune(vecs, node, cand_ids, cand_dists, alpha, r_budget, seen_stamp, stamp):
        m = cand_ids.shape[0]
        order = np.argsort(cand_dists, kind="mergesort")
        alive = np.ones(m, np.bool_)
        for oi in range(m):
            i = order[oi]
            v = cand_ids[i]
            if v == node or seen_stamp[v] == stamp:
                alive[i] = False
            seen_stamp[v] = stamp
        a2 = alpha * alpha
        sel = np.empty(r_budget, np.int32)
        nsel = 0
        for oi in range(m):
            i = order[oi]
            if not alive[i]:
                continue
            p = cand_ids[i]
            sel[nsel] = p
            nsel += 1
            if nsel == r_budget:
                break
            alive[i] = False
            for oj in range(oi + 1, m):
                j = order[oj]
                if alive[j]:
                    dp = _nb_l2sq_pair(vecs[p], vecs[cand_ids[j]])
                    if a2 * dp <= cand_dists[j]:
                        alive[j] = False
        return sel[:nsel].copy()

    @njit(cache=True, nogil=True)
    def _nb_build_graph(vecs, init_nbrs, init_degs, entry, order, L, alpha, r_budget):
        n = vecs.shape[0]
        nbrs = init_nbrs.copy()
        degs = init_degs.copy()
        seen_stamp = np.zeros(n, np.int64)
        stamp = 0
        pool_ids = np.empty(n + r_budget, np.int32)
        pool_dists = np.empty(n + r_budget, np.float64)
        for a in (1.0, alpha):
            for oi in range(order.shape[0]):
                i = order[oi]
                _, _, pi, pd = _nb_greedy_search(vecs, nbrs, degs, np.int32(entry), vecs[i], L)
                pn = pi.shape[0]
                pool_ids[:pn] = pi
                pool_dists[:pn] = pd
                for e in range(degs[i]):
                    j = nbrs[i, e]
                    pool_ids[pn] = j
                    pool_dists[pn] = _nb_l2sq_pair(vecs[i], vecs[j])
                    pn += 1
                stamp += 1
                sel = _nb_robust_prune(
                    vecs, i, pool_ids[:pn], pool_dists[:pn], a, r_budget, seen_stamp, stamp
                )
                degs[i] = sel.shape[0]
                for e in range(sel.shape[0]):
                    nbrs[i, e] = sel[e]
                for e in range(sel.shape[0]):
                    j = sel[e]
                    present = False
                    for t in range(degs[j]):
                        if nbrs[j, t] == i:
                            present = True
                            break
                    if present:
                        continue
                    if degs[j] < r_budget:
                        nbrs[j, degs[j]] = i
                        degs[j] += 1
                    else:
                        pn2 = degs[j] + 1
                        for t in range(degs[j]):
                            pool_ids[t] = nbrs[j, t]
                            pool_dists[t] = _nb_l2sq_pair(vecs[j], vecs[nbrs[j, t]])
                        pool_ids[degs[j]] = i
                        pool_dists[degs[j]] = _nb_l2sq_pair(vecs[j], vecs[i])
                        stamp += 1
                        sel2 = _nb_robust_prune(
                            vecs, j, pool_ids[:pn2], pool_dists[:pn2], a, r_budget,
                            seen_stamp, stamp,
                        )
                        degs[j] = sel2.shape[0]
                        for t in range(sel2.shape[0]):
                            nbrs[j, t] = sel2[t]
        return nbrs, degs

    numba_backend = SimpleNamespace(
        l2sq_pair=_nb_l2sq_pair,
        l2sq_batch=_nb_l2sq_batch,
        ip_dist_batch=_nb_ip_dist_batch,
        assign_chunk=_nb_assign_chunk,
        lb_exceeds=_nb_lb_exceeds,
        greedy_search=_nb_greedy_search_wrap,
        build_graph=_nb_build_graph,
    )


_active = numba_backend if USE_NUMBA else numpy_backend

l2sq_pair = _active.l2sq_pair
l2sq_batch = _active.l2sq_batch
ip_dist_batch = _active.ip_dist_batch
assign_chunk = _active.assign_chunk
lb_exceeds = _active.lb_exceeds
greedy_search = _active.greedy_search
build_graph = _active.build_graph
