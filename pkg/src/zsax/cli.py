"""Command-line front end: ``generate``, ``build``, ``query`` and ``bench``.

Every command prints a JSON report to stdout (or writes JSON and CSV under
``--out-dir``). ``query --oracle`` and ``bench`` exit with status 2 when an
exact answer disagrees with the linear scan.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from .bench import (KINDS, MODES, STRATEGIES, BenchReport, BuildParams, WorkloadSpec, describe_index,
                    io_delta, query_row, run_query, run_workload)
from .errors import ConfigError, ConfigMismatch, ZsaxError
from .lsm import MANIFEST, LsmIndex, bulk_load_lsm
from .search import brute_force, window_floor
from .series import random_walk_block, random_walk_generate
from .storage import IoStats, RawFile, write_dataset
from .summarization import SummaryConfig
from .tree import DEFAULT_FILL, DEFAULT_LEAF_SIZE, TREE_MAGIC, TreeIndex, build_tree
from .trie import TRIE_MAGIC, TrieIndex, build_trie

EXIT_MISMATCH = 2


def cmd_generate(count: int, n: int, seed: int, out, timestamps: bool = False) -> dict:
    stats = IoStats()
    write_dataset(out, random_walk_generate(count, n, seed), n, stats, timestamps=timestamps)
    return {"path": os.fspath(out), "count": count, "n": n, "seed": seed, "timestamps": timestamps,
            "bytes": os.path.getsize(out)}


def open_index(path, stats: IoStats):
    """Open a tree or trie file by its magic, or a log-structured index directory."""
    if os.path.isdir(path):
        if not os.path.exists(os.path.join(path, MANIFEST)):
            raise ConfigError(f"{path} is a directory without a {MANIFEST}")
        return LsmIndex.open(path, stats)
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == TREE_MAGIC:
        return TreeIndex.open(path, stats)
    if magic == TRIE_MAGIC:
        return TrieIndex.open(path, stats)
    raise ConfigError(f"{path} is not an index (magic {magic!r})")


def cmd_build(dataset, mode: str, out, params: BuildParams) -> dict:
    stats = IoStats(block_size_records=params.block_records)
    probe = RawFile.open(dataset, IoStats())
    count, n = probe.count, probe.n
    probe.close()
    cfg = SummaryConfig(params.cfg.w, params.cfg.c, n)
    budget = params.budget(count)
    t0 = time.perf_counter()
    if mode == "tree":
        idx = build_tree(dataset, cfg, out, params.leaf_size, params.fill, budget, params.materialized, stats)
    elif mode == "trie":
        idx = build_trie(dataset, cfg, out, params.leaf_size, budget, params.materialized, stats)
    elif mode == "lsm":
        idx = bulk_load_lsm(dataset, cfg, out, budget, params.materialized, stats,
                            buffer_records=params.buffer_records, size_ratio=params.size_ratio,
                            leaf_size=params.leaf_size, fill=params.fill)
    else:
        raise ConfigError(f"build mode must be tree, trie or lsm, got {mode!r}")
    wall = time.perf_counter() - t0
    report = {"mode": mode, "dataset": os.fspath(dataset), "index": os.fspath(out), "count": count,
              "cfg": {"w": cfg.w, "c": cfg.c, "n": cfg.n}, "block_records": params.block_records,
              "memory_records": budget.max_records_in_memory, "advisory_wall_s": wall,
              "io": io_delta(stats, IoStats(block_size_records=stats.block_size_records)),
              "structure": describe_index(idx)}
    idx.close(seal_buffer=False) if isinstance(idx, LsmIndex) else idx.close()
    return report


def _raw_of(idx) -> str:
    if isinstance(idx, LsmIndex):
        return idx.raw.path
    if not idx.raw_path:
        raise ConfigError("the index does not record its dataset, so no oracle is available")
    return idx.raw_path


def load_queries(path, count: int, n: int, seed: int) -> np.ndarray:
    if path:
        raw = RawFile.open(path, IoStats())
        try:
            if raw.n != n:
                raise ConfigMismatch(f"queries have length {raw.n}, the index expects {n}")
            return raw.read_records(0, raw.count)["series"].astype(np.float64)
        finally:
            raw.close()
    return random_walk_block(count, n, np.random.default_rng([seed, 2]))


def cmd_query(index, kind: str, queries=None, count: int = 100, seed: int = 0, radius: int = 1,
              window: int | None = None, strategy: str | None = None, oracle: bool = False,
              block_records: int = 1000, workers: int = 1) -> BenchReport:
    if kind == "window" and (window is None or window < 1):
        raise ConfigError("--kind window needs --window >= 1")
    stats = IoStats(block_size_records=block_records)
    idx = open_index(index, stats)
    try:
        qs = load_queries(queries, count, idx.cfg.n, seed)
        data = ts = None
        if oracle:
            raw = RawFile.open(_raw_of(idx), IoStats())
            recs = raw.read_records(0, raw.count)
            data = recs["series"].astype(np.float64)
            ts = recs["ts"] if raw.has_timestamps else np.arange(1, raw.count + 1)
            raw.close()
        now = idx.max_ts if isinstance(idx, LsmIndex) else int(idx.snapshot.ts.max(initial=0))
        floor = window_floor(now, window) if kind == "window" else None
        report = BenchReport("query", kind, strategy if kind == "window" else None,
                             {"index": os.fspath(index), "queries": int(qs.shape[0]), "window": window},
                             {"radius": radius, "block_records": block_records, "oracle": oracle})
        t0 = time.perf_counter()
        for k, q in enumerate(qs):
            before = stats.copy()
            m, state = run_query(idx, q, kind, radius, window, strategy, workers)
            ref = brute_force(data, q, ts, floor)[1] if oracle else None
            report.queries.append(query_row(0, k, now, m, state, io_delta(stats, before), ref, kind))
        report.phases.append({"phase": "query", "advisory_wall_s": time.perf_counter() - t0,
                              **io_delta(stats, IoStats(block_size_records=block_records))})
        report.structure = describe_index(idx)
    finally:
        idx.close(seal_buffer=False) if isinstance(idx, LsmIndex) else idx.close()
    qrows = report.queries
    report.totals = {"queries": len(qrows), "mismatches": report.mismatches,
                     "mean_distance": float(np.mean([r["distance"] for r in qrows])) if qrows else None,
                     "mean_visited_records": float(np.mean([r["visited_records"] for r in qrows])) if qrows else None}
    return report


def cmd_bench(spec: WorkloadSpec, mode: str, out_dir, params: BuildParams) -> BenchReport:
    return run_workload(spec, mode, os.path.join(out_dir, f"work-{mode}"), params)


def _add_build_flags(p: argparse.ArgumentParser):
    p.add_argument("--segments", type=int, default=16, help="PAA segments w")
    p.add_argument("--cardinality-bits", type=int, default=8, help="bits per SAX symbol c")
    p.add_argument("--leaf-size", type=int, default=DEFAULT_LEAF_SIZE)
    p.add_argument("--fill", type=float, default=DEFAULT_FILL)
    p.add_argument("--memory-records", type=int, default=None, help="sort budget M in records (default: all)")
    p.add_argument("--materialized", action="store_true", help="store series bytes in the leaves")
    p.add_argument("--size-ratio", type=int, default=2)
    p.add_argument("--buffer-records", type=int, default=250, help="insert buffer of the lsm mode")
    p.add_argument("--block-records", type=int, default=1000, help="records per instrumented block B")


def _params(a, strategy=None) -> BuildParams:
    return BuildParams(cfg=SummaryConfig(a.segments, a.cardinality_bits, getattr(a, "length", 256)),
                       block_records=a.block_records, leaf_size=a.leaf_size, fill=a.fill,
                       memory_records=a.memory_records, materialized=a.materialized,
                       buffer_records=a.buffer_records, size_ratio=a.size_ratio, strategy=strategy,
                       workers=getattr(a, "workers", 1))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="zsax", description="Sortable-summary data series indexes.")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write z-normalized random walks to a raw dataset file")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--length", type=int, default=256)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--timestamps", action="store_true", help="store a u64 timestamp per series")
    g.add_argument("--out", required=True)

    b = sub.add_parser("build", help="bulk-load an index from a dataset")
    b.add_argument("dataset")
    b.add_argument("--mode", choices=("tree", "trie", "lsm"), default="tree")
    b.add_argument("--out", required=True, help="index file (tree, trie) or directory (lsm)")
    _add_build_flags(b)

    q = sub.add_parser("query", help="run queries against an index")
    q.add_argument("index")
    q.add_argument("--queries", default=None, help="raw dataset of queries (default: fresh random walks)")
    q.add_argument("--count", type=int, default=100, help="number of generated queries")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--kind", choices=KINDS, default="exact")
    q.add_argument("--radius", type=int, default=1, help="approximate search radius in leaves")
    q.add_argument("--window", type=int, default=None, help="most recent W insertions")
    q.add_argument("--window-strategy", choices=STRATEGIES, default=None)
    q.add_argument("--oracle", action="store_true", help="cross-check against a linear scan")
    q.add_argument("--block-records", type=int, default=1000)
    q.add_argument("--workers", type=int, default=1)
    q.add_argument("--out-dir", default=None)

    w = sub.add_parser("bench", help="run an interleaved insert/query workload")
    w.add_argument("--initial", type=int, default=10_000)
    w.add_argument("--batch", type=int, default=1_000)
    w.add_argument("--batches", type=int, default=10)
    w.add_argument("--queries", type=int, default=100, help="total queries, spread over the gaps")
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--length", type=int, default=256)
    w.add_argument("--mode", choices=MODES, default="lsm")
    w.add_argument("--kind", choices=KINDS, default="exact")
    w.add_argument("--radius", type=int, default=1)
    w.add_argument("--window", type=int, default=None)
    w.add_argument("--window-strategy", choices=STRATEGIES, default=None)
    w.add_argument("--indexed-queries", action="store_true", help="query with recently inserted series")
    w.add_argument("--workers", type=int, default=1)
    w.add_argument("--out-dir", required=True)
    _add_build_flags(w)
    return ap


def _emit(report: BenchReport, out_dir, stem: str):
    if out_dir:
        report.write(out_dir, stem)
    print(report.to_json())


def main(argv=None) -> int:
    a = build_parser().parse_args(argv)
    try:
        if a.command == "generate":
            print(json.dumps(cmd_generate(a.count, a.length, a.seed, a.out, a.timestamps), indent=2))
            return 0
        if a.command == "build":
            print(json.dumps(cmd_build(a.dataset, a.mode, a.out, _params(a)), indent=2))
            return 0
        if a.command == "query":
            report = cmd_query(a.index, a.kind, a.queries, a.count, a.seed, a.radius, a.window,
                               a.window_strategy, a.oracle, a.block_records, a.workers)
            _emit(report, a.out_dir, "query")
            return EXIT_MISMATCH if report.mismatches else 0
        spec = WorkloadSpec(a.initial, a.batch, a.batches, a.queries, a.kind, a.window, a.seed, a.radius,
                            a.length, a.indexed_queries)
        report = cmd_bench(spec, a.mode, a.out_dir, _params(a, a.window_strategy))
        _emit(report, a.out_dir, f"bench-{a.mode}-{a.kind}")
        return EXIT_MISMATCH if report.mismatches else 0
    except (ZsaxError, ValueError, OSError) as exc:
        print(f"zsax: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
