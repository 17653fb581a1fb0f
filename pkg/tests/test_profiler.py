import itertools
import math

import numpy as np
import pytest

from skewann.profiler import (FLAT, GRAPH, IVFFLAT, MEM_UNIT, HardwareProfile,
                              IndexPlan, InfeasibleBudgetError, calibrate,
                              nlist_rule, predict_latency, predict_memory, rd,
                              solve_plan, tr)


@pytest.fixture
def profile():
    return HardwareProfile(bw_seq=1024 ** 3, lat_rand=100e-6, c_vec=1e-8,
                           alpha_flat=1.0, beta_scan=1.0, rho_cache=0.25,
                           b_buf=65536, deg=32, a=1.0, b=0.0)


def enumerate_plan(profile, sizes, dim, budget, weights=None):
    """3^n brute force under the solver's 64 KiB-unit memory contract."""
    k = len(sizes)
    weights = weights if weights is not None else np.ones(k)
    cap = int(budget // MEM_UNIT)
    best = None
    for combo in itertools.product((FLAT, GRAPH, IVFFLAT), repeat=k):
        units = sum(math.ceil(predict_memory(profile, t, int(n), dim) / MEM_UNIT)
                    for t, n in zip(combo, sizes))
        if units > cap:
            continue
        obj = sum(w * predict_latency(profile, t, int(n), dim)
                  for t, n, w in zip(combo, sizes, weights))
        if best is None or obj < best[0]:
            best = (obj, combo)
    return best


# -- profile file ------------------------------------------------------------


def test_profile_file_roundtrip_exact(tmp_path, profile):
    path = tmp_path / "prof.txt"
    profile.save(str(path))
    back = HardwareProfile.load(str(path))
    assert back == profile


def test_fixed_profile_passthrough(tmp_path, profile):
    path = tmp_path / "prof.txt"
    profile.save(str(path))
    got = calibrate(str(tmp_path), fixed_profile=str(path))
    assert got == profile


def test_profile_validation():
    with pytest.raises(ValueError):
        HardwareProfile(bw_seq=0, lat_rand=1e-6, c_vec=1e-9)
    with pytest.raises(ValueError):
        HardwareProfile(bw_seq=1e9, lat_rand=1e-6, c_vec=1e-9, rho_cache=1.5)
    with pytest.raises(ValueError):
        HardwareProfile(bw_seq=1e9, lat_rand=1e-6, c_vec=1e-9, nlist_max=3)


# -- Tr / Rd operators ---------------------------------------------------------


def test_tr_rd_zero(profile):
    assert tr(profile, 0) == 0.0
    assert rd(profile, 0) == 0.0


def test_tr_hand_value(profile):
    # 4 MiB at 1 GiB/s = 2^-8 s ~ 3.906 ms
    assert tr(profile, 4 * 1024 * 1024) == pytest.approx(0.00390625)


def test_rd_hand_value(profile):
    # ceil(5000 / 4096) * 100 us = 200 us
    assert rd(profile, 5000) == pytest.approx(200e-6)


def test_rd_steps_exactly_at_page_multiples(profile):
    for pages in (1, 2, 7):
        edge = pages * 4096
        assert rd(profile, edge) == pages * profile.lat_rand
        assert rd(profile, edge + 1) == (pages + 1) * profile.lat_rand
    # monotone non-decreasing
    vals = [rd(profile, b) for b in range(0, 3 * 4096, 512)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


# -- latency / memory models -----------------------------------------------------


def test_graph_hop_floor(profile):
    # a=1, b=0, N=1 -> H = max(1, 0) = 1 hop
    want = rd(profile, profile.node_bytes(16)) + profile.deg * profile.c_vec
    assert predict_latency(profile, GRAPH, 1, 16) == pytest.approx(want)


def test_nlist_rule_values():
    assert nlist_rule(16, 1024) == 4
    assert nlist_rule(10 ** 5, 1024) == 316
    assert nlist_rule(10 ** 6, 1024) == 1000
    assert nlist_rule(10 ** 8, 1024) == 1024
    assert nlist_rule(5, 1024) == 4


def test_ivf_scans_expected_vectors(profile):
    # N=16 -> nlist=4, scans (16/4)*local_nprobe vectors
    p = profile
    p.local_nprobe = 2
    scanned = (16 / 4) * 2
    want = p.beta_scan * tr(p, 4.0 * 8 * scanned) + scanned * p.c_vec
    assert predict_latency(p, IVFFLAT, 16, 8) == pytest.approx(want)


def test_flat_latency_exactly_linear(profile):
    d = 24
    slope = 4.0 * d / profile.bw_seq + profile.alpha_flat * profile.c_vec
    for n in (1, 10, 1000, 12345):
        assert predict_latency(profile, FLAT, n, d) == pytest.approx(n * slope)


def test_flat_beats_graph_on_tiny_clusters(profile):
    # small-cluster regime: sequential scan outruns per-hop random reads
    assert predict_latency(profile, FLAT, 100, 32) < predict_latency(profile, GRAPH, 100, 32)


def test_memory_models(profile):
    assert predict_memory(profile, FLAT, 12345, 64) == profile.b_buf
    p0 = HardwareProfile(bw_seq=1e9, lat_rand=1e-4, c_vec=1e-8, rho_cache=0.0)
    assert predict_memory(p0, GRAPH, 1000, 64) == 0.0
    assert predict_memory(profile, IVFFLAT, 10 ** 6, 96) == 4 * 96 * 1000 == 384000


def test_unknown_index_type(profile):
    with pytest.raises(ValueError):
        predict_latency(profile, 7, 10, 10)


# -- solver ------------------------------------------------------------------


def test_unbounded_budget_gives_argmin(profile):
    sizes = np.array([100, 10_000, 1_000_000])
    plan = solve_plan(profile, sizes, dim=32, budget=math.inf)
    for i, n in enumerate(sizes):
        lats = [predict_latency(profile, t, int(n), 32) for t in (FLAT, GRAPH, IVFFLAT)]
        assert plan.predicted_latency[i] == pytest.approx(min(lats))


def test_solver_matches_enumeration_small():
    rng = np.random.default_rng(0)
    profile = HardwareProfile(bw_seq=2e9, lat_rand=5e-6, c_vec=2e-8,
                              beta_scan=4.0, b_buf=16 * 1024)
    for trial in range(20):
        k = int(rng.integers(2, 7))
        sizes = rng.integers(10, 200_000, size=k)
        mems = np.array([[predict_memory(profile, t, int(n), 32)
                          for t in (FLAT, GRAPH, IVFFLAT)] for n in sizes])
        lo = sum(math.ceil(m / MEM_UNIT) for m in mems.min(axis=1)) * MEM_UNIT
        hi = mems.max(axis=1).sum()
        budget = float(rng.uniform(lo, max(hi, lo + 1)))
        plan = solve_plan(profile, sizes, dim=32, budget=budget)
        want_obj, _ = enumerate_plan(profile, sizes, 32, budget)
        assert plan.objective == pytest.approx(want_obj, rel=1e-12)
        assert plan.total_memory <= budget


def test_infeasible_budget_reports_minimum(profile):
    sizes = np.array([1000, 1000])
    with pytest.raises(InfeasibleBudgetError) as err:
        solve_plan(profile, sizes, dim=32, budget=1.0)
    assert err.value.min_memory > 0


def test_plan_deterministic_bytes(tmp_path, profile):
    sizes = np.array([50, 5000, 500_000, 42])
    p1 = solve_plan(profile, sizes, dim=32, budget=2 * 2 ** 20)
    p2 = solve_plan(profile, sizes, dim=32, budget=2 * 2 ** 20)
    f1, f2 = tmp_path / "a.orpl", tmp_path / "b.orpl"
    p1.save(str(f1))
    p2.save(str(f2))
    assert f1.read_bytes() == f2.read_bytes()


def test_plan_save_load_roundtrip(tmp_path, profile):
    sizes = np.array([10, 20000])
    plan = solve_plan(profile, sizes, dim=16, budget=math.inf)
    path = tmp_path / "plan.orpl"
    plan.save(str(path))
    back = IndexPlan.load(str(path))
    assert np.array_equal(back.choice, plan.choice)
    assert np.allclose(back.predicted_latency, plan.predicted_latency)
    assert np.array_equal(back.predicted_memory, plan.predicted_memory)
    assert back.total_memory == plan.total_memory
    assert math.isinf(back.budget)


def test_weights_shift_decision():
    # a heavily-weighted large cluster earns the fast-but-hungry index
    profile = HardwareProfile(bw_seq=2e9, lat_rand=5e-6, c_vec=2e-8,
                              beta_scan=4.0, b_buf=16 * 1024, rho_cache=0.25)
    sizes = np.array([20_000, 20_000])
    g_mem = predict_memory(profile, GRAPH, 20_000, 32)
    budget = g_mem + 3 * MEM_UNIT  # room for exactly one graph
    w1 = solve_plan(profile, sizes, dim=32, budget=budget, weights=[100.0, 1.0])
    w2 = solve_plan(profile, sizes, dim=32, budget=budget, weights=[1.0, 100.0])
    assert w1.choice[0] == GRAPH and w2.choice[1] == GRAPH
    assert w1.choice[1] != GRAPH and w2.choice[0] != GRAPH


# -- live calibration (sanity bands only; real numbers are machine-specific) -----


def test_calibrate_measures_sane_values(tmp_path):
    p1 = calibrate(str(tmp_path), trials=32, dim=64, seed=0)
    p2 = calibrate(str(tmp_path), trials=32, dim=64, seed=1)
    assert p1.bw_seq > 0 and p2.bw_seq > 0
    ratio = p1.bw_seq / p2.bw_seq
    assert 0.5 <= ratio <= 2.0  # repeat measurement within a 2x band
    assert 0 < p1.c_vec < 1e-5  # amortized single-distance cost at dim 64
    assert p1.lat_rand > 0
    assert p1.a > 0


def test_calibrate_requires_min_scratch(tmp_path):
    with pytest.raises(ValueError):
        calibrate(str(tmp_path), scratch_file_size=1024, trials=8, dim=8)
