"""Command-line surface: gen, groundtruth, build, query, eval, stats, motivate.

Exit codes: 0 success, 2 usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from datetime import datetime, timezone

import numpy as np

from . import datagen, navigation, profiler, storage
from .engine import (Deployment, QueryConfig, evaluate_recall, execute_query,
                     gt_cluster_sets, run_epoch_loop)
from .local_index import BuildParams, build_local_index
from .navigation import GraphAbstraction, NavGraphSnapshot, bootstrap_ga
from .partition import ClusterPartition, assign_query_clusters, kmeans_partition, skew_report
from .profiler import INDEX_TYPE_CODES, HardwareProfile, IndexPlan, calibrate, solve_plan
from .storage import VectorStore, read_ivecs, read_vecs, write_vecs


def parse_bytes(text):
    """'64MiB', '100MB', '1G', 'inf', or a plain byte count."""
    t = text.strip().lower()
    if t in ("inf", "none", "unlimited"):
        return math.inf
    units = {"kib": 2**10, "mib": 2**20, "gib": 2**30, "kb": 10**3, "mb": 10**6,
             "gb": 10**9, "k": 2**10, "m": 2**20, "g": 2**30, "b": 1}
    for suffix in sorted(units, key=len, reverse=True):
        if t.endswith(suffix):
            return float(t[: -len(suffix)]) * units[suffix]
    return float(t)


def load_config_file(path):
    out = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            out[key.strip()] = val.strip()
    return out


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


def cmd_gen(args):
    n, d = args.n, args.d
    if args.kind == "grid":
        data = datagen.gen_grid(n, d)
        labels, coords = None, None
    elif args.kind == "blobs":
        data, labels, coords = datagen.gen_blobs(n, d, args.centers, args.sigma, args.seed)
    else:
        data, labels, coords = datagen.gen_zipf(n, d, args.centers, args.alpha,
                                                args.sigma, args.seed,
                                                args.density_skew)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)) or ".", exist_ok=True)
    base = args.out + "_base.fvecs"
    write_vecs(base, data, "fvecs")
    meta = {
        "kind": args.kind, "n": n, "d": d, "seed": args.seed,
        "centers": args.centers, "alpha": args.alpha, "sigma": args.sigma,
        "density_skew": args.density_skew,
        "queries": args.queries, "query_sigma": args.query_sigma,
        "hot_center_frac": args.hot_center_frac,
        "base": os.path.basename(base),
    }
    if args.queries > 0:
        if coords is None:
            rng = np.random.default_rng(args.seed + 1)
            q = data[rng.integers(0, n, size=args.queries)].copy()
        else:
            pops = np.bincount(labels, minlength=len(coords))
            dens = args.density_skew if args.kind == "zipf-skewed" else 0.0
            q = datagen.gen_queries(coords, pops, args.queries,
                                    args.query_sigma if args.query_sigma >= 0 else args.sigma,
                                    args.seed, args.hot_center_frac, dens)
        qpath = args.out + "_query.fvecs"
        write_vecs(qpath, q, "fvecs")
        meta["query_file"] = os.path.basename(qpath)
    with open(args.out + "_meta.json", "w") as f:
        json.dump(meta, f, indent=2)
    print(f"wrote {base} ({n} x {d})")
    return 0


# ---------------------------------------------------------------------------
# groundtruth
# ---------------------------------------------------------------------------


def cmd_groundtruth(args):
    data = read_vecs(args.dataset)
    queries = read_vecs(args.queries)
    gt = datagen.brute_force_knn(data, queries, args.k)
    write_vecs(args.out, gt, "ivecs")
    print(f"wrote {args.out} ({len(gt)} queries x {args.k})")
    return 0


# ---------------------------------------------------------------------------
# build
# ---------------------------------------------------------------------------


def cmd_build(args):
    cfg = load_config_file(args.config) if args.config else {}

    def opt(name, default, cast):
        cli = getattr(args, name.replace("-", "_"))
        if cli is not None:
            return cli
        if name in cfg:
            return cast(cfg[name])
        return default

    seed = opt("seed", 0, int)
    k = opt("k", 64, int)
    samples = opt("samples-per-cluster", 8, int)
    graph_r = opt("graph-r", 32, int)
    graph_alpha = opt("graph-alpha", 1.2, float)
    graph_lbuild = opt("graph-lbuild", 64, int)
    nlist_max = opt("nlist-max", 1024, int)
    budget = parse_bytes(opt("budget", "inf", str))

    out = args.out
    os.makedirs(out, exist_ok=True)
    idx_dir = os.path.join(out, "indices")
    os.makedirs(idx_dir, exist_ok=True)

    store = VectorStore.open(args.dataset)
    t0 = time.perf_counter()
    part = kmeans_partition(store, k, max_iters=opt("kmeans-iters", 25, int), seed=seed)
    part_path = os.path.join(out, "partition.orcp")
    part.save(part_path)
    t_cluster = time.perf_counter() - t0

    t0 = time.perf_counter()
    if args.fixed_profile:
        profile = HardwareProfile.load(args.fixed_profile)
    else:
        profile = calibrate(out, dim=store.dim, seed=seed)
    profile.nlist_max = nlist_max
    prof_path = os.path.join(out, "profile.txt")
    profile.save(prof_path)
    t_profile = time.perf_counter() - t0

    weights = None
    if args.weights:
        weights = np.loadtxt(args.weights, dtype=np.float64).reshape(-1)
    allowed = tuple(INDEX_TYPE_CODES[t.strip()] for t in args.plan_types.split(","))
    t0 = time.perf_counter()
    plan = solve_plan(profile, part, weights=weights, budget=budget, allowed_types=allowed)
    plan_path = os.path.join(out, "plan.orpl")
    plan.save(plan_path)

    params = BuildParams(r=graph_r, alpha=graph_alpha, l_build=graph_lbuild,
                         nlist_max=nlist_max, seed=seed)
    index_files = []
    for cid in range(part.k):
        path = os.path.join(idx_dir, f"cluster_{cid}.idx")
        build_local_index(store, part, cid, int(plan.choice[cid]), path, params)
        index_files.append(os.path.relpath(path, out))
    t_local = time.perf_counter() - t0

    t0 = time.perf_counter()
    ga = bootstrap_ga(store, part, samples_per_cluster=samples, r=graph_r,
                      alpha=graph_alpha, l_build=graph_lbuild, seed=seed)
    ga_path = os.path.join(out, "ga_v0.bin")
    ga.save(ga_path)
    t_ga = time.perf_counter() - t0

    manifest = {
        "dataset": os.path.abspath(args.dataset),
        "elem_kind": store.elem_kind,
        "n": store.count,
        "dim": store.dim,
        "k": k,
        "partition_file": "partition.orcp",
        "profile_file": "profile.txt",
        "plan_file": "plan.orpl",
        "index_files": index_files,
        "ga_file": "ga_v0.bin",
        "ga_bootstrap_size": ga.node_count,
        "budget_bytes": None if math.isinf(budget) else int(budget),
        "plan_total_memory": plan.total_memory,
        "config": {
            "seed": seed, "k": k, "samples_per_cluster": samples,
            "graph_r": graph_r, "graph_alpha": graph_alpha,
            "graph_lbuild": graph_lbuild, "nlist_max": nlist_max,
            "plan_types": args.plan_types,
            "budget": opt("budget", "inf", str),
            "fixed_profile": bool(args.fixed_profile),
        },
        "timestamps": {
            "built_at": datetime.now(timezone.utc).isoformat(),
            "clustering_s": t_cluster,
            "profile_s": t_profile,
            "local_indices_s": t_local,
            "ga_s": t_ga,
        },
    }
    with open(os.path.join(out, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    counts = {name: int((plan.choice == code).sum())
              for name, code in INDEX_TYPE_CODES.items()}
    print(f"built {out}: k={k} plan={counts} memory={plan.total_memory} B")
    return 0


def load_manifest(path):
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    with open(path) as f:
        manifest = json.load(f)
    root = os.path.dirname(os.path.abspath(path))
    manifest["_root"] = root
    return manifest


def _check_magic(path, magic):
    with open(path, "rb") as f:
        head = f.read(4)
    if head != magic:
        raise ValueError(f"{path}: expected magic {magic!r}, found {head!r}")


def open_deployment(manifest, backing="mmap", verify_fraction=0.01):
    root = manifest["_root"]
    part_path = os.path.join(root, manifest["partition_file"])
    plan_path = os.path.join(root, manifest["plan_file"])
    ga_path = os.path.join(root, manifest["ga_file"])
    _check_magic(part_path, b"ORCP")
    _check_magic(plan_path, b"ORPL")
    _check_magic(ga_path, b"ORGA")
    for rel in manifest["index_files"]:
        _check_magic(os.path.join(root, rel), b"ORLI")
    store = VectorStore.open(manifest["dataset"], backing=backing)
    part = ClusterPartition.load(part_path)
    plan = IndexPlan.load(plan_path)
    deploy = Deployment(store, part, plan, os.path.join(root, "indices"),
                        verify_fraction=verify_fraction)
    snapshot = NavGraphSnapshot.load(ga_path)
    return deploy, snapshot


# ---------------------------------------------------------------------------
# query
# ---------------------------------------------------------------------------


def _query_config(args):
    return QueryConfig(
        k=args.k, nprobe=args.nprobe, rho=args.rho, beam_l=args.beam_l,
        max_hops=args.max_hops, local_nprobe=args.local_nprobe,
        reorder=not args.no_reorder, earlystop=not args.no_earlystop,
        pruning=not args.no_pruning, ga_refresh=not args.no_ga_refresh,
        min_clusters=args.min_clusters, delta_q=args.delta_q,
        workers=args.workers,
    )


def cmd_query(args):
    manifest = load_manifest(args.manifest)
    deploy, snapshot = open_deployment(manifest, backing=args.backing)
    queries = read_vecs(args.queries)
    config = _query_config(args)

    h = args.h if args.h > 0 else max(1, snapshot.bootstrap_size // 100)
    ga = GraphAbstraction(snapshot, deploy.store, deploy.part, h=h,
                          cache_budget=int(parse_bytes(args.cache_budget)))

    gt_clusters = None
    if args.groundtruth:
        gt = read_ivecs(args.groundtruth)
        gt_clusters = gt_cluster_sets(deploy.part, gt, config.k)

    os.makedirs(args.out, exist_ok=True)
    deploy.store.reset_counters()
    t0 = time.perf_counter()
    results, stats, epochs = run_epoch_loop(deploy, ga, queries, config,
                                            gt_clusters=gt_clusters)
    wall = time.perf_counter() - t0

    with open(os.path.join(args.out, "results.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["query_id", "rank", "vector_id", "distance"])
        for qid, res in enumerate(results):
            for rank, (vid, dist) in enumerate(res):
                w.writerow([qid, rank, vid, f"{dist:.9g}"])
    with open(os.path.join(args.out, "stats.jsonl"), "w") as f:
        for s in stats:
            f.write(json.dumps(s.to_json()) + "\n")
    with open(os.path.join(args.out, "epochs.jsonl"), "w") as f:
        for e in epochs:
            f.write(json.dumps(e) + "\n")
    lat = np.array([s.latency for s in stats])
    summary = {
        "n_queries": len(queries), "k": config.k,
        "nprobe": config.resolved_nprobe(), "workers": config.resolved_workers(),
        "wall_s": wall, "qps": len(queries) / wall,
        "mean_latency_s": float(lat.mean()), "p99_latency_s": float(np.percentile(lat, 99)),
        "mean_raw_fetches": float(np.mean([s.raw_fetches for s in stats])),
        "mean_pages_touched": float(np.mean([s.pages_touched for s in stats])),
        "store_fetches": deploy.store.fetch_counter,
        "store_pages": deploy.store.page_counter,
        "epochs": len(epochs),
    }
    with open(os.path.join(args.out, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2)
    print(json.dumps(summary))
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def read_results_csv(path, k=None):
    per_query = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            per_query.setdefault(int(row["query_id"]), []).append(
                (int(row["rank"]), int(row["vector_id"])))
    out = []
    for qid in sorted(per_query):
        ids = [vid for _, vid in sorted(per_query[qid])]
        out.append(ids if k is None else ids[:k])
    return out


def cmd_eval(args):
    results_path = args.results
    stats_path, summary_path = args.stats, args.summary
    if os.path.isdir(results_path):
        run = results_path
        results_path = os.path.join(run, "results.csv")
        stats_path = stats_path or os.path.join(run, "stats.jsonl")
        summary_path = summary_path or os.path.join(run, "summary.json")
    res = read_results_csv(results_path, args.k)
    gt = read_ivecs(args.groundtruth)
    recall = evaluate_recall(res, gt, args.k)
    row = {"k": args.k, "recall": f"{recall:.6f}", "qps": "", "mean_latency_s": "",
           "p99_latency_s": "", "mean_raw_fetches": "", "mean_pages_touched": ""}
    if stats_path and os.path.exists(stats_path):
        recs = [json.loads(line) for line in open(stats_path)]
        lat = np.array([r["latency"] for r in recs])
        row["mean_latency_s"] = f"{lat.mean():.6g}"
        row["p99_latency_s"] = f"{np.percentile(lat, 99):.6g}"
        row["mean_raw_fetches"] = f"{np.mean([r['raw_fetches'] for r in recs]):.2f}"
        row["mean_pages_touched"] = f"{np.mean([r['pages_touched'] for r in recs]):.2f}"
    if summary_path and os.path.exists(summary_path):
        with open(summary_path) as f:
            row["qps"] = f"{json.load(f)['qps']:.2f}"
    out = sys.stdout if not args.out else open(args.out, "w", newline="")
    try:
        w = csv.DictWriter(out, fieldnames=list(row))
        w.writeheader()
        w.writerow(row)
    finally:
        if args.out:
            out.close()
    return 0


# ---------------------------------------------------------------------------
# stats
# ---------------------------------------------------------------------------


def cmd_stats(args):
    path = args.epochs
    if os.path.isdir(path):
        path = os.path.join(path, "epochs.jsonl")
    with open(path) as f:
        for line in f:
            sys.stdout.write(line)
    return 0


# ---------------------------------------------------------------------------
# motivate
# ---------------------------------------------------------------------------


def _motivate_skew(args, out):
    store = VectorStore.open(args.dataset)
    part = kmeans_partition(store, args.k, seed=args.seed)
    rep = skew_report(part)
    w = csv.writer(out)
    w.writerow(["metric", "value"])
    for key in ("min", "max", "mean", "std"):
        w.writerow([key, getattr(rep, key)])
    w.writerow([])
    w.writerow(["bucket_low", "bucket_high", "clusters"])
    for lo, hi, c in rep.histogram:
        w.writerow([lo, hi, c])
    return 0


def _motivate_gt_clusters(args, out):
    """Share of probed clusters that contain zero true neighbors."""
    manifest = load_manifest(args.manifest)
    deploy, snapshot = open_deployment(manifest)
    queries = read_vecs(args.queries)
    gt = read_ivecs(args.groundtruth)
    gtc = gt_cluster_sets(deploy.part, gt, args.k)
    w = csv.writer(out)
    w.writerow(["nprobe", "mean_probed", "pct_probed_without_gt"])
    for nprobe in args.nprobe_list:
        wasted, probed_total = 0, 0
        for qid, q in enumerate(queries):
            seeds = navigation.traverse_ga(snapshot, q, nprobe)
            probed = set(s.cid for s in seeds)
            wasted += len(probed - gtc[qid])
            probed_total += len(probed)
        w.writerow([nprobe, probed_total / len(queries),
                    100.0 * wasted / max(probed_total, 1)])
    return 0


def _motivate_routing(args, out):
    """QPS/recall for centroid vs static-sample vs query-aware routing."""
    manifest = load_manifest(args.manifest)
    queries = read_vecs(args.queries)
    gt = read_ivecs(args.groundtruth)
    w = csv.writer(out)
    w.writerow(["mode", "nprobe", "recall", "qps"])
    for mode in ("centroid", "sample", "query-aware"):
        for nprobe in args.nprobe_list:
            deploy, snapshot = open_deployment(manifest)
            config = QueryConfig(k=args.k, nprobe=nprobe, rho=1.0,
                                 local_nprobe=0, earlystop=False,
                                 ga_refresh=(mode == "query-aware"),
                                 workers=args.workers, delta_q=args.delta_q)
            t0 = time.perf_counter()
            if mode == "centroid":
                res = []
                m = max(1, min(nprobe // 4, deploy.part.k))
                for q in queries:
                    res.append(_centroid_route_query(deploy, q, config, m))
            else:
                h = max(1, snapshot.bootstrap_size // 10)
                ga = GraphAbstraction(snapshot, deploy.store, deploy.part, h=h)
                res, _, _ = run_epoch_loop(deploy, ga, queries, config)
            wall = time.perf_counter() - t0
            ids = [[v for v, _ in r] for r in res]
            w.writerow([mode, nprobe, f"{evaluate_recall(ids, gt, args.k):.4f}",
                        f"{len(queries) / wall:.2f}"])
    return 0


def _centroid_route_query(deploy, q, config, m):
    """Baseline routing: visit the m nearest-centroid clusters directly."""
    from .engine import FetchContext, QueryStats, TopKQueue
    from .local_index import SearchBudget

    topk = TopKQueue(config.k)
    stats = QueryStats()
    ctx = FetchContext(deploy.store, None, stats)
    budget = SearchBudget(config.resolved_beam(), 0, config.pruning)
    for cid in assign_query_clusters(deploy.part, q, m):
        idx = deploy.index_for(int(cid))
        if idx.index_type == profiler.GRAPH:
            idx.search(q, topk, ctx, budget, stats=stats)
        elif idx.index_type == profiler.FLAT:
            idx.search(q, topk, ctx, pruning=config.pruning, stats=stats)
        else:
            idx.search(q, topk, ctx, config.local_nprobe,
                       pruning=config.pruning, stats=stats)
    return topk.result()


def cmd_motivate(args):
    out = sys.stdout if not args.out else open(args.out, "w", newline="")
    try:
        if args.experiment == "skew":
            return _motivate_skew(args, out)
        if args.experiment == "gt-clusters":
            return _motivate_gt_clusters(args, out)
        return _motivate_routing(args, out)
    finally:
        if args.out:
            out.close()


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _int_list(text):
    return [int(t) for t in text.split(",") if t.strip()]


def build_parser():
    p = argparse.ArgumentParser(prog="skewann",
                                description="out-of-core ANN engine for skewed data")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--kind", choices=["blobs", "zipf-skewed", "grid"], required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--d", type=int, required=True)
    g.add_argument("--centers", type=int, default=64)
    g.add_argument("--alpha", type=float, default=1.2, help="zipf skew exponent")
    g.add_argument("--sigma", type=float, default=0.5)
    g.add_argument("--density-skew", type=float, default=0.35,
                   help="zipf: heavier centers get sigma * pop^-this")
    g.add_argument("--queries", type=int, default=0)
    g.add_argument("--query-sigma", type=float, default=-1.0,
                   help="query noise; defaults to --sigma")
    g.add_argument("--hot-center-frac", type=float, default=None,
                   help="concentrate queries on this fraction of centers")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output path prefix")
    g.set_defaults(func=cmd_gen)

    g = sub.add_parser("groundtruth", help="exact k-NN by exhaustive scan")
    g.add_argument("--dataset", required=True)
    g.add_argument("--queries", required=True)
    g.add_argument("--k", type=int, default=100)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_groundtruth)

    g = sub.add_parser("build", help="partition, profile, plan, build indices + GA")
    g.add_argument("--dataset", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--k", type=int, default=None)
    g.add_argument("--budget", default=None, help="memory budget, e.g. 64MiB or inf")
    g.add_argument("--config", default=None, help="key=value config file")
    g.add_argument("--fixed-profile", default=None,
                   help="profile file to use instead of calibrating")
    g.add_argument("--weights", default=None, help="per-cluster weight file")
    g.add_argument("--plan-types", default="flat,graph,ivfflat")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--samples-per-cluster", type=int, default=None)
    g.add_argument("--kmeans-iters", type=int, default=None)
    g.add_argument("--graph-r", type=int, default=None)
    g.add_argument("--graph-alpha", type=float, default=None)
    g.add_argument("--graph-lbuild", type=int, default=None)
    g.add_argument("--nlist-max", type=int, default=None)
    g.set_defaults(func=cmd_build)

    g = sub.add_parser("query", help="run a query batch against a build")
    g.add_argument("--manifest", required=True)
    g.add_argument("--queries", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--k", type=int, default=10)
    g.add_argument("--nprobe", type=int, default=0, help="GA seeds; 0 -> 4k")
    g.add_argument("--rho", type=float, default=0.2)
    g.add_argument("--beam-l", type=int, default=0)
    g.add_argument("--max-hops", type=int, default=0)
    g.add_argument("--local-nprobe", type=int, default=8, help="0 -> all lists")
    g.add_argument("--min-clusters", type=int, default=0)
    g.add_argument("--delta-q", type=int, default=1000)
    g.add_argument("--h", type=int, default=0, help="refresh width; 0 -> 1%% of GA")
    g.add_argument("--workers", type=int, default=0)
    g.add_argument("--cache-budget", default="64MiB")
    g.add_argument("--backing", choices=["mmap", "buffered"], default="mmap")
    g.add_argument("--groundtruth", default=None,
                   help="enables per-query cluster-selection precision")
    g.add_argument("--no-reorder", action="store_true")
    g.add_argument("--no-earlystop", action="store_true")
    g.add_argument("--no-pruning", action="store_true")
    g.add_argument("--no-ga-refresh", action="store_true")
    g.set_defaults(func=cmd_query)

    g = sub.add_parser("eval", help="recall / QPS / latency / I-O table")
    g.add_argument("--results", required=True, help="results.csv or a query out dir")
    g.add_argument("--groundtruth", required=True)
    g.add_argument("--k", type=int, default=10)
    g.add_argument("--stats", default=None)
    g.add_argument("--summary", default=None)
    g.add_argument("--out", default=None)
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("stats", help="print per-epoch GA refresh events")
    g.add_argument("--epochs", required=True, help="epochs.jsonl or a query out dir")
    g.set_defaults(func=cmd_stats)

    g = sub.add_parser("motivate", help="desk-scale motivation experiments")
    g.add_argument("--experiment", choices=["skew", "gt-clusters", "routing"],
                   required=True)
    g.add_argument("--dataset", default=None)
    g.add_argument("--manifest", default=None)
    g.add_argument("--queries", default=None)
    g.add_argument("--groundtruth", default=None)
    g.add_argument("--k", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--nprobe-list", type=_int_list, default=[8, 16, 32, 64])
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--delta-q", type=int, default=500)
    g.add_argument("--out", default=None)
    g.set_defaults(func=cmd_motivate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
