"""Hardware cost calibration, per-index latency/memory models, plan solving.

Given calibrated primitives (sequential bandwidth, random 4 KiB read
latency, per-distance compute cost) this module predicts how long each
index type takes on a cluster of N vectors and how much serving memory it
needs, then assigns one index type per cluster by solving a
multiple-choice knapsack under a global memory budget.

The solver is exact dynamic programming over a memory axis quantized to
64 KiB units: per-cluster memory is rounded up to whole units and the
budget rounded down, so the returned plan never exceeds the budget in
actual bytes and is the exact optimum of the quantized problem (the
solver's optimality contract). Quantization error is bounded by
(#clusters x 64 KiB).
"""

from __future__ import annotations

import math
import os
import struct
import time
from dataclasses import dataclass, fields

import numpy as np

from . import kernels

PLAN_MAGIC = b"ORPL"
_PLAN_HEADER = struct.Struct("<4sIQQ")   # magic, n_clusters, budget, total_memory
_PLAN_RECORD = struct.Struct("<BdQ")     # type, predicted_latency, predicted_memory

MEM_UNIT = 64 * 1024
_INF_BUDGET = 0xFFFFFFFFFFFFFFFF

FLAT, GRAPH, IVFFLAT = 0, 1, 2
INDEX_TYPE_NAMES = {FLAT: "flat", GRAPH: "graph", IVFFLAT: "ivfflat"}
INDEX_TYPE_CODES = {v: k for k, v in INDEX_TYPE_NAMES.items()}


@dataclass
class HardwareProfile:
    """Calibrated device primitives plus fitted model coefficients."""

    bw_seq: float        # bytes/second sequential read bandwidth
    lat_rand: float      # seconds per random 4 KiB read
    c_vec: float         # seconds per single distance computation
    alpha_flat: float = 1.0
    beta_scan: float = 1.0
    rho_cache: float = 0.25
    b_buf: float = 256 * 1024.0
    b_node: float = 0.0    # 0 -> derived as 4d + 4*deg + 16 at first use
    deg: float = 32.0
    a: float = 1.0         # hop-count slope: H(N) = max(1, a*ln N + b)
    b: float = 0.0
    nlist_max: int = 1024
    local_nprobe: int = 8

    def __post_init__(self):
        for name in ("bw_seq", "lat_rand", "c_vec"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        if not 0.0 <= self.rho_cache <= 1.0:
            raise ValueError("rho_cache must be in [0, 1]")
        if self.nlist_max < 4:
            raise ValueError("nlist_max must be >= 4")
        if self.local_nprobe < 1:
            raise ValueError("local_nprobe must be >= 1")

    def node_bytes(self, d):
        return self.b_node if self.b_node > 0 else 4.0 * d + 4.0 * self.deg + 16.0

    def save(self, path):
        with open(path, "w") as f:
            for fld in fields(self):
                f.write(f"{fld.name}={getattr(self, fld.name)!r}\n")

    @classmethod
    def load(cls, path):
        kwargs = {}
        int_fields = {"nlist_max", "local_nprobe"}
        valid = {fld.name for fld in fields(cls)}
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, val = line.partition("=")
                key = key.strip()
                if key not in valid:
                    raise ValueError(f"{path}: unknown profile field {key!r}")
                kwargs[key] = int(val) if key in int_fields else float(val)
        return cls(**kwargs)


def tr(profile, nbytes):
    """Streaming transfer time: Tr(B) = B / BW_seq."""
    if nbytes < 0:
        raise ValueError("byte count must be non-negative")
    return nbytes / profile.bw_seq


def rd(profile, nbytes):
    """Random-read time: Rd(B) = ceil(B / 4KiB) * Lat_rand."""
    if nbytes < 0:
        raise ValueError("byte count must be non-negative")
    return math.ceil(nbytes / 4096) * profile.lat_rand


def nlist_rule(n, nlist_max):
    """Sub-list count for an IVF-Flat cluster: max{4, min(floor(sqrt N), cap)}."""
    return max(4, min(math.isqrt(n), nlist_max))


def predict_latency(profile, index_type, n, d):
    """Model per-query latency of one index type on a cluster of n vectors."""
    if n < 1 or d < 1:
        raise ValueError("n and d must be >= 1")
    if index_type == FLAT:
        return tr(profile, 4.0 * n * d) + profile.alpha_flat * n * profile.c_vec
    if index_type == GRAPH:
        hops = max(1.0, profile.a * math.log(n) + profile.b)
        return hops * (rd(profile, profile.node_bytes(d)) + profile.deg * profile.c_vec)
    if index_type == IVFFLAT:
        nlist = nlist_rule(n, profile.nlist_max)
        nprobe = min(profile.local_nprobe, nlist)
        scanned = (n / nlist) * nprobe
        return profile.beta_scan * tr(profile, 4.0 * d * scanned) + scanned * profile.c_vec
    raise ValueError(f"unknown index type {index_type!r}")


def predict_memory(profile, index_type, n, d):
    """Model serving memory (bytes) of one index type on a cluster of n vectors."""
    if n < 1 or d < 1:
        raise ValueError("n and d must be >= 1")
    if index_type == FLAT:
        return float(profile.b_buf)
    if index_type == GRAPH:
        return profile.rho_cache * n * profile.node_bytes(d)
    if index_type == IVFFLAT:
        return 4.0 * d * nlist_rule(n, profile.nlist_max)
    raise ValueError(f"unknown index type {index_type!r}")


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


def _time_flat_scan(x, q, reps):
    t0 = time.perf_counter()
    for _ in range(reps):
        kernels.l2sq_batch(q, x)
    return (time.perf_counter() - t0) / reps


def calibrate(scratch_dir, scratch_file_size=64 * 1024 * 1024, trials=256, dim=128,
              seed=0, fixed_profile=None):
    """Measure device primitives and fit model coefficients on this machine.

    With ``fixed_profile`` set, the profile is loaded from that file and
    returned untouched (the deterministic path builds and tests use).
    """
    if fixed_profile is not None:
        return HardwareProfile.load(fixed_profile)
    if scratch_file_size < 64 * 1024 * 1024:
        raise ValueError("scratch_file_size must be at least 64 MiB")
    if not os.access(scratch_dir, os.W_OK):
        raise OSError(f"scratch directory {scratch_dir!r} not writable")

    rng = np.random.default_rng(seed)
    scratch = os.path.join(scratch_dir, "skewann_calib.bin")
    chunk = np.zeros(4 * 1024 * 1024, dtype=np.uint8)
    with open(scratch, "wb") as f:
        for _ in range(scratch_file_size // len(chunk)):
            f.write(chunk)
    try:
        fd = os.open(scratch, os.O_RDONLY)
        try:
            t0 = time.perf_counter()
            read = 0
            while True:
                buf = os.read(fd, len(chunk))
                if not buf:
                    break
                read += len(buf)
            bw_seq = read / max(time.perf_counter() - t0, 1e-9)

            n_pages = scratch_file_size // 4096
            offs = rng.integers(0, n_pages, size=trials) * 4096
            lats = np.empty(trials)
            for i, off in enumerate(offs):
                t0 = time.perf_counter()
                os.pread(fd, 4096, int(off))
                lats[i] = time.perf_counter() - t0
            lat_rand = float(np.median(lats))
        finally:
            os.close(fd)
    finally:
        os.remove(scratch)

    # per-distance compute cost, amortized over >= 1e6 computations
    x = rng.standard_normal((8192, dim)).astype(np.float32)
    q = x[0].copy()
    kernels.l2sq_batch(q, x)  # warm any jit
    reps = max(1, int(1_000_000 // len(x)) + 1)
    c_vec = _time_flat_scan(x, q, reps) / len(x)

    profile = HardwareProfile(bw_seq=bw_seq, lat_rand=lat_rand, c_vec=c_vec)

    # alpha_flat: least squares of measured scan time against the Flat model
    sizes = (2000, 8000, 32000)
    num = den = 0.0
    for n in sizes:
        xs = rng.standard_normal((n, dim)).astype(np.float32)
        meas = _time_flat_scan(xs, q, 3)
        resid = meas - tr(profile, 4.0 * n * dim)
        num += resid * n * c_vec
        den += (n * c_vec) ** 2
    profile.alpha_flat = max(num / den, 1e-3) if den > 0 else 1.0
    # posting-list scans run the same kernel; layout effects are negligible
    # at this scale, so beta_scan keeps the Flat-fitted throughput
    profile.beta_scan = 1.0

    # hop-count coefficients from measured beam-search pops on sample graphs
    from . import navgraph  # deferred; navgraph imports kernels only

    hops = []
    gsizes = (256, 1024, 4096)
    for n in gsizes:
        xs = rng.standard_normal((n, dim)).astype(np.float32)
        g = navgraph.build_navigable_graph(xs, r=16, alpha=1.2, l_build=32, seed=seed)
        pops = []
        for qi in rng.integers(0, n, size=16):
            _, _, pool, _ = kernels.greedy_search(xs, g.neighbors, g.degrees,
                                                  g.entry_point, xs[int(qi)], 16)
            pops.append(len(pool))
        hops.append(np.mean(pops))
    logs = np.log(np.array(gsizes, dtype=np.float64))
    coeffs = np.polyfit(logs, np.array(hops), 1)
    profile.a = float(max(coeffs[0], 1e-3))
    profile.b = float(coeffs[1])
    return profile


# ---------------------------------------------------------------------------
# plan solving
# ---------------------------------------------------------------------------


@dataclass
class IndexPlan:
    choice: np.ndarray             # (k,) uint8 index type per cluster
    predicted_latency: np.ndarray  # (k,) float64 seconds
    predicted_memory: np.ndarray   # (k,) uint64 bytes
    total_memory: int
    budget: float                  # bytes, may be math.inf
    weights: np.ndarray

    def save(self, path):
        budget = _INF_BUDGET if math.isinf(self.budget) else int(self.budget)
        with open(path, "wb") as f:
            f.write(_PLAN_HEADER.pack(PLAN_MAGIC, len(self.choice), budget,
                                      self.total_memory))
            for t, lat, mem in zip(self.choice, self.predicted_latency,
                                   self.predicted_memory):
                f.write(_PLAN_RECORD.pack(int(t), float(lat), int(mem)))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            raw = f.read()
        magic, n, budget, total = _PLAN_HEADER.unpack_from(raw, 0)
        if magic != PLAN_MAGIC:
            raise ValueError(f"{path}: bad plan magic {magic!r}")
        choice = np.empty(n, dtype=np.uint8)
        lat = np.empty(n, dtype=np.float64)
        mem = np.empty(n, dtype=np.uint64)
        off = _PLAN_HEADER.size
        for i in range(n):
            choice[i], lat[i], mem[i] = _PLAN_RECORD.unpack_from(raw, off)
            off += _PLAN_RECORD.size
        return cls(choice, lat, mem, int(total),
                   math.inf if budget == _INF_BUDGET else float(budget),
                   np.ones(n))

    @property
    def objective(self):
        return float((self.weights * self.predicted_latency).sum())


class InfeasibleBudgetError(ValueError):
    def __init__(self, budget, min_memory, min_units=None):
        self.min_memory = min_memory
        self.min_units = min_units
        quantized = "" if min_units is None else (
            f", {min_units * MEM_UNIT:.0f} B under 64 KiB-unit accounting")
        super().__init__(
            f"memory budget {budget:.0f} B infeasible: minimal achievable "
            f"plan memory is {min_memory:.0f} B{quantized}"
        )


def solve_plan(profile, sizes, weights=None, budget=math.inf, dim=None,
               allowed_types=(FLAT, GRAPH, IVFFLAT)):
    """Assign one index type per cluster minimizing weighted predicted latency.

    ``sizes`` is a per-cluster vector-count array (a ClusterPartition also
    works). Exact DP over the 64 KiB-quantized memory axis; ties between
    types at equal cost prefer the lower-memory type. Raises
    InfeasibleBudgetError when even the memory-minimal plan cannot fit.
    """
    if hasattr(sizes, "sizes"):
        if dim is None:
            dim = sizes.dim
        sizes = sizes.sizes
    sizes = np.asarray(sizes, dtype=np.int64)
    if dim is None:
        raise ValueError("dim is required when sizes is a plain array")
    k = len(sizes)
    if weights is None:
        weights = np.ones(k)
    weights = np.asarray(weights, dtype=np.float64)
    types = sorted(allowed_types)
    if not types:
        raise ValueError("allowed_types must not be empty")

    lat = np.empty((k, len(types)))
    mem = np.empty((k, len(types)))
    for i, n in enumerate(sizes):
        for j, t in enumerate(types):
            lat[i, j] = weights[i] * predict_latency(profile, t, int(n), dim)
            mem[i, j] = predict_memory(profile, t, int(n), dim)

    if math.isinf(budget):
        pick = _argmin_latency_low_memory(lat, mem)
    else:
        cost_units = np.ceil(mem / MEM_UNIT).astype(np.int64)
        cap = int(budget // MEM_UNIT)
        min_units = int(cost_units.min(axis=1).sum())
        if min_units > cap:
            raise InfeasibleBudgetError(budget, float(mem.min(axis=1).sum()), min_units)
        pick = _knapsack_dp(lat, mem, cost_units, cap)

    choice = np.array([types[j] for j in pick], dtype=np.uint8)
    chosen_lat = np.array([predict_latency(profile, int(choice[i]), int(sizes[i]), dim)
                           for i in range(k)])
    chosen_mem = np.array([predict_memory(profile, int(choice[i]), int(sizes[i]), dim)
                           for i in range(k)], dtype=np.float64)
    return IndexPlan(choice, chosen_lat, chosen_mem.astype(np.uint64),
                     int(chosen_mem.sum()), budget, weights)


def _argmin_latency_low_memory(lat, mem):
    """Per-cluster argmin latency; equal-cost ties go to the lower-memory type."""
    k = lat.shape[0]
    pick = np.empty(k, dtype=np.int64)
    for i in range(k):
        order = np.lexsort((mem[i], lat[i]))
        pick[i] = order[0]
    return pick


def _knapsack_dp(lat, mem, cost_units, cap):
    """Multiple-choice knapsack, exact over the quantized capacity axis.

    dp[u] = min total latency with total quantized memory <= u units,
    which is monotone non-increasing in u; the answer sits at dp[cap].
    """
    k, t = lat.shape
    dp = np.zeros(cap + 1)
    choice = np.zeros((k, cap + 1), dtype=np.int8)
    for i in range(k):
        new = np.full(cap + 1, np.inf)
        # visit types from high to low memory (then high to low latency,
        # then high to low code) with a <= update, so at equal cost the
        # last writer -- the lower-memory type -- wins the tie
        order = sorted(range(t), key=lambda j: (-mem[i][j], -lat[i][j], -j))
        for j in order:
            c = int(cost_units[i, j])
            if c > cap:
                continue
            cand = np.full(cap + 1, np.inf)
            cand[c:] = dp[: cap + 1 - c] + lat[i, j]
            choice[i][cand <= new] = j
            np.minimum(new, cand, out=new)
        dp = new
    if not np.isfinite(dp[cap]):
        raise InfeasibleBudgetError(cap * MEM_UNIT, float(mem.min(axis=1).sum()))
    u = cap
    pick = np.empty(k, dtype=np.int64)
    for i in range(k - 1, -1, -1):
        j = int(choice[i][u])
        pick[i] = j
        u -= int(cost_units[i, j])
    return pick
