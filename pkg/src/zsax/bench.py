"""Interleaved insert/query workloads and their reports.

A workload starts from ``initial_count`` random walks, then alternates query
gaps with insert batches: gap 0, batch 1, gap 1, ..., batch k, gap k. The
queries are spread evenly over the ``batches + 1`` gaps. Every exact or
windowed answer is checked against an in-memory linear scan.

Reports keep a fixed field order so that two runs with the same seed produce
the same JSON and CSV apart from the ``advisory_wall_s`` fields.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import shutil
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .extsort import MemoryBudget
from .lsm import LsmIndex, approx_search_lsm, bulk_load_lsm, exact_search_lsm_sims
from .search import SearchState, brute_force, window_floor
from .series import random_walk_block, random_walk_generate
from .storage import IoStats, RawFile, write_dataset
from .summarization import SummaryConfig
from .tree import DEFAULT_FILL, DEFAULT_LEAF_SIZE, TreeIndex, approx_search, build_tree, exact_search_sims
from .trie import TrieIndex, approx_search_trie, build_trie, exact_search_trie
from .window import TemporalPartitions, window_query_btp, window_query_pp, window_query_tp

MODES = ("tree", "trie", "lsm", "tp")
KINDS = ("approx", "exact", "window")
STRATEGIES = ("pp", "tp", "btp")
DEFAULT_STRATEGY = {"tree": "pp", "trie": None, "lsm": "btp", "tp": "tp"}

QUERY_COLUMNS = ("gap", "query", "ts_now", "distance", "oracle_distance", "ratio", "match",
                 "visited_records", "pruned", "partitions_touched", "records_fetched",
                 "blocks_read", "blocks_written", "random_seeks")


@dataclass(frozen=True)
class WorkloadSpec:
    initial_count: int = 10_000
    insert_batch_size: int = 1_000
    batches: int = 10
    queries: int = 100
    query_kind: str = "exact"
    window: int | None = None
    seed: int = 0
    radius: int = 1
    n: int = 256
    indexed_queries: bool = False  # draw queries from the newest indexed series instead of fresh walks

    def __post_init__(self):
        if self.initial_count < 1 or self.insert_batch_size < 0 or self.batches < 0 or self.queries < 0:
            raise ConfigError("workload sizes must be non-negative and the initial dataset non-empty")
        if self.query_kind not in KINDS:
            raise ConfigError(f"query kind must be one of {KINDS}, got {self.query_kind!r}")
        if self.query_kind == "window" and (self.window is None or self.window < 1):
            raise ConfigError("windowed workloads need a window >= 1")

    @property
    def final_count(self) -> int:
        return self.initial_count + self.batches * self.insert_batch_size

    @property
    def queries_per_gap(self) -> list[int]:
        return [len(a) for a in np.array_split(np.arange(self.queries), self.batches + 1)]


@dataclass
class BuildParams:
    cfg: SummaryConfig = field(default_factory=SummaryConfig)
    block_records: int = 1000
    leaf_size: int = DEFAULT_LEAF_SIZE
    fill: float = DEFAULT_FILL
    memory_records: int | None = None
    materialized: bool = False
    buffer_records: int = 250
    size_ratio: int = 2
    strategy: str | None = None
    workers: int = 1

    def budget(self, count: int) -> MemoryBudget:
        return MemoryBudget(self.memory_records or max(2, count))


@dataclass
class BenchReport:
    mode: str
    kind: str
    strategy: str | None
    workload: dict
    params: dict
    phases: list = field(default_factory=list)
    queries: list = field(default_factory=list)
    structure: dict = field(default_factory=dict)
    totals: dict = field(default_factory=dict)

    @property
    def mismatches(self) -> int:
        return sum(1 for q in self.queries if q["match"] is False)

    def to_dict(self, wall_clock: bool = True) -> dict:
        d = asdict(self)
        if not wall_clock:
            for ph in d["phases"]:
                ph.pop("advisory_wall_s", None)
            d["totals"].pop("advisory_wall_s", None)
        return d

    def to_json(self, wall_clock: bool = True) -> str:
        return json.dumps(self.to_dict(wall_clock), indent=2, default=_plain)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(QUERY_COLUMNS)
        for q in self.queries:
            w.writerow([_plain(q[c]) if q[c] is not None else "" for c in QUERY_COLUMNS])
        return buf.getvalue()

    def write(self, out_dir, stem: str = "report"):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, stem + ".json"), "w") as f:
            f.write(self.to_json())
        with open(os.path.join(out_dir, stem + ".csv"), "w") as f:
            f.write(self.to_csv())


def _plain(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float):
        return round(x, 12)
    return x


def io_delta(after: IoStats, before: IoStats) -> dict:
    d = (after - before).as_dict()
    d.pop("block_size_records")
    return d


def fill_summary(counts, capacity: int) -> dict:
    """Leaf utilization: mean, minimum over non-final leaves and a 10-bucket histogram."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size == 0:
        return {"leaves": 0, "mean": 0.0, "min_non_final": None, "histogram": [0] * 10}
    util = counts / capacity
    hist, _ = np.histogram(util, bins=10, range=(0.0, 1.0))
    return {"leaves": int(counts.size), "mean": float(util.mean()),
            "min_non_final": float(util[:-1].min()) if counts.size > 1 else None,
            "histogram": hist.tolist()}


def describe_index(idx) -> dict:
    """Structure counters for any index kind, for build and bench reports."""
    if isinstance(idx, TreeIndex):
        return {"kind": "tree", "count": idx.count, "depth": idx.depth,
                "fill": fill_summary(idx.leaf_counts(), idx.leaf_size)}
    if isinstance(idx, TrieIndex):
        return {"kind": "trie", "count": idx.count, "max_depth": max(idx.leaf_depths(), default=0),
                "fill": fill_summary(idx.leaf_counts(), idx.leaf_size)}
    if isinstance(idx, LsmIndex):
        counts = [c for r in idx.runs_newest_first() for c in r.index.leaf_counts()]
        return {"kind": "lsm", "count": idx.count, "run_count": idx.run_count, "buffered": idx.buffered,
                "merges": idx.merges, "max_merge_depth": idx.max_merge_depth(),
                "levels": [r.level for r in idx.runs_newest_first()],
                "fill": fill_summary(counts, idx.leaf_size)}
    if isinstance(idx, TemporalPartitions):
        counts = [c for p in idx.partitions for c in p.leaf_counts()]
        return {"kind": "tp", "count": idx.count, "partitions": len(idx.partitions), "buffered": idx.buffered,
                "fill": fill_summary(counts, idx.leaf_size)}
    raise TypeError(f"cannot describe {type(idx).__name__}")


def run_query(idx, q, kind: str, radius: int = 1, window: int | None = None, strategy: str | None = None,
              workers: int = 1):
    """Dispatch one query; returns ``(match, state)``."""
    state = SearchState()
    if kind == "approx":
        if isinstance(idx, TrieIndex):
            m = approx_search_trie(q, idx, state)
        elif isinstance(idx, LsmIndex):
            m = approx_search_lsm(q, idx, radius, state)
        elif isinstance(idx, TreeIndex):
            m = approx_search(q, idx, radius, state)
        else:
            raise ConfigError(f"approximate search is not offered on {type(idx).__name__}")
    elif kind == "exact":
        if isinstance(idx, TrieIndex):
            m = exact_search_trie(q, idx, state, workers)
        elif isinstance(idx, LsmIndex):
            m = exact_search_lsm_sims(q, idx, None, radius, state, workers)
        elif isinstance(idx, TreeIndex):
            m = exact_search_sims(q, idx, radius, state, workers)
        else:
            raise ConfigError(f"exact search is not offered on {type(idx).__name__}")
    elif kind == "window":
        m = _window_query(idx, q, window, radius, strategy, state, workers)
    else:
        raise ConfigError(f"query kind must be one of {KINDS}, got {kind!r}")
    return m, state


def _window_query(idx, q, window, radius, strategy, state, workers):
    if isinstance(idx, TrieIndex):
        raise ConfigError("windowed search needs a tree, a log-structured index or temporal partitions")
    strategy = strategy or ("btp" if isinstance(idx, LsmIndex) else "tp" if isinstance(idx, TemporalPartitions)
                            else "pp")
    if strategy == "pp":
        if isinstance(idx, TemporalPartitions):
            raise ConfigError("post-processing runs on a tree or a log-structured index")
        return window_query_pp(q, idx, window, radius, state, workers)
    if strategy == "tp":
        if isinstance(idx, LsmIndex):
            # the runs of a leveled index cover disjoint time ranges, so they serve as partitions
            parts = [r.index for r in idx.runs_newest_first()[::-1]] + [idx.buffer_view()]
            return window_query_tp(q, parts, window, radius, state, workers)
        return window_query_tp(q, idx if isinstance(idx, TemporalPartitions) else [idx], window, radius,
                               state, workers)
    if strategy == "btp":
        if not isinstance(idx, LsmIndex):
            raise ConfigError("bounded temporal partitioning needs a log-structured index")
        return window_query_btp(q, idx, window, radius, state, workers)
    raise ConfigError(f"window strategy must be one of {STRATEGIES}, got {strategy!r}")


def query_row(gap, k, now, m, state, io: dict, oracle: float | None, kind: str) -> dict:
    ratio = None
    match = None
    if oracle is not None:
        if kind == "approx":
            ratio = m.distance / oracle if oracle > 0 else (1.0 if m.distance == 0 else math.inf)
        else:
            match = bool(abs(m.distance - oracle) <= 1e-6)
    return {"gap": gap, "query": k, "ts_now": now, "distance": m.distance, "oracle_distance": oracle,
            "ratio": ratio, "match": match, "visited_records": state.visited_records, "pruned": state.pruned,
            "partitions_touched": state.partitions_touched, **io}


class _Driver:
    """Owns one index under a workload; the tree and trie modes rebuild after each batch."""

    def __init__(self, mode: str, raw_path: str, workdir: str, params: BuildParams, stats: IoStats):
        self.mode, self.params, self.stats, self.workdir = mode, params, stats, workdir
        self.version = 0
        cfg, p = params.cfg, params
        if mode in ("tree", "trie"):
            self.raw = RawFile.open(raw_path, stats, writable=True)
            self.idx = self._rebuild()
        elif mode == "lsm":
            self.idx = bulk_load_lsm(raw_path, cfg, os.path.join(workdir, "lsm"), p.budget(0),
                                     p.materialized, stats, buffer_records=p.buffer_records,
                                     size_ratio=p.size_ratio, leaf_size=p.leaf_size, fill=1.0)
        elif mode == "tp":
            self.idx = TemporalPartitions.from_dataset(raw_path, cfg, os.path.join(workdir, "tp"), stats,
                                                       p.budget(0), buffer_records=p.buffer_records,
                                                       leaf_size=p.leaf_size, fill=1.0,
                                                       materialized=p.materialized)
        else:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")

    def _rebuild(self):
        p = self.params
        old = getattr(self, "idx", None)
        path = os.path.join(self.workdir, f"{self.mode}-{self.version:04d}")
        self.version += 1
        if self.mode == "tree":
            idx = build_tree(self.raw, p.cfg, path + ".ctre", p.leaf_size, p.fill, p.budget(self.raw.count),
                             p.materialized, self.stats)
        else:
            idx = build_trie(self.raw, p.cfg, path + ".ctri", p.leaf_size, p.budget(self.raw.count),
                             p.materialized, self.stats)
        if old is not None:
            old.close()
            os.remove(old.path)
        return idx

    @property
    def now(self) -> int:
        if self.mode in ("tree", "trie"):
            return self.raw.count
        return self.idx.max_ts

    def insert(self, block: np.ndarray):
        if self.mode in ("tree", "trie"):
            recs = np.zeros(block.shape[0], dtype=self.raw.dtype)
            recs["series"] = block
            if self.raw.has_timestamps:
                recs["ts"] = np.arange(self.raw.count + 1, self.raw.count + 1 + block.shape[0])
            self.raw.append_records(recs)
            self.raw.flush()
            self.idx = self._rebuild()
        else:
            self.idx.insert_many(block)

    def close(self):
        if self.mode in ("tree", "trie"):
            self.idx.close()
            self.raw.close()
        else:
            self.idx.close()


def run_workload(spec: WorkloadSpec, mode: str, workdir, params: BuildParams | None = None,
                 check: bool = True) -> BenchReport:
    """Run the interleaved workload against one index mode and collect counters."""
    params = params or BuildParams()
    if params.cfg.n != spec.n:
        params.cfg = SummaryConfig(params.cfg.w, params.cfg.c, spec.n)
    strategy = params.strategy or DEFAULT_STRATEGY[mode] if spec.query_kind == "window" else None
    if spec.query_kind == "window" and mode == "trie":
        raise ConfigError("windowed workloads run on tree, lsm or tp")
    os.makedirs(workdir, exist_ok=True)
    stats = IoStats(block_size_records=params.block_records)
    report = BenchReport(mode, spec.query_kind, strategy, asdict(spec),
                         {k: v for k, v in asdict(params).items() if k != "cfg"} | {"cfg": asdict(params.cfg)})

    raw_path = os.path.join(workdir, "series.ccnt")
    write_dataset(raw_path, random_walk_generate(spec.initial_count, spec.n, spec.seed), spec.n, IoStats())
    data = [RawFile.open(raw_path, IoStats()).read_records(0, spec.initial_count)["series"].astype(np.float64)]
    insert_rng = np.random.default_rng([spec.seed, 1])
    query_rng = np.random.default_rng([spec.seed, 2])

    def phase(name, fn):
        before = stats.copy()
        t0 = time.perf_counter()
        out = fn()
        report.phases.append({"phase": name, "advisory_wall_s": time.perf_counter() - t0,
                              **io_delta(stats, before)})
        return out

    driver = phase("build", lambda: _Driver(mode, raw_path, workdir, params, stats))
    try:
        k = 0
        for gap, nq in enumerate(spec.queries_per_gap):
            if gap:
                block = random_walk_block(spec.insert_batch_size, spec.n, insert_rng)
                block = block.astype(np.float32).astype(np.float64)
                data.append(block)
                phase(f"insert-{gap}", lambda: driver.insert(block))
            allv = np.concatenate(data) if len(data) > 1 else data[0]
            data = [allv]
            now = driver.now
            floor = window_floor(now, spec.window) if spec.query_kind == "window" else None
            if spec.indexed_queries:
                lo = max(0, allv.shape[0] - max(spec.insert_batch_size, 1))
                qs = allv[query_rng.integers(lo, allv.shape[0], nq)]
            else:
                qs = random_walk_block(nq, spec.n, query_rng)
            t0 = time.perf_counter()
            before_gap = stats.copy()
            for q in qs:
                before = stats.copy()
                m, state = run_query(driver.idx, q, spec.query_kind, spec.radius, spec.window, strategy,
                                     params.workers)
                io_q = io_delta(stats, before)
                oracle = None
                if check:
                    ts = np.arange(1, allv.shape[0] + 1)
                    oracle = brute_force(allv, q, ts, floor)[1]
                report.queries.append(query_row(gap, k, now, m, state, io_q, oracle, spec.query_kind))
                k += 1
            report.phases.append({"phase": f"query-{gap}", "advisory_wall_s": time.perf_counter() - t0,
                                  **io_delta(stats, before_gap)})
        report.structure = describe_index(driver.idx)
    finally:
        driver.close()
    report.totals = _totals(report, stats)
    return report


def _totals(report: BenchReport, stats: IoStats) -> dict:
    qs = report.queries
    ratios = [q["ratio"] for q in qs if q["ratio"] is not None]
    inserts = [p for p in report.phases if p["phase"].startswith("insert")]
    return {
        "queries": len(qs),
        "mismatches": report.mismatches,
        "mean_distance": float(np.mean([q["distance"] for q in qs])) if qs else None,
        "mean_ratio": float(np.mean(ratios)) if ratios else None,
        "mean_visited_records": float(np.mean([q["visited_records"] for q in qs])) if qs else None,
        "query_records_fetched": sum(q["records_fetched"] for q in qs),
        "insert_blocks_written": sum(p["blocks_written"] for p in inserts),
        "insert_blocks_read": sum(p["blocks_read"] for p in inserts),
        **{k: v for k, v in stats.as_dict().items() if k != "block_size_records"},
        "advisory_wall_s": sum(p["advisory_wall_s"] for p in report.phases),
    }


def compare_modes(spec: WorkloadSpec, modes, workdir, params: BuildParams | None = None) -> dict:
    """Run the same workload per mode, each in its own scratch directory."""
    out = {}
    for mode in modes:
        where = os.path.join(workdir, mode)
        shutil.rmtree(where, ignore_errors=True)
        out[mode] = run_workload(spec, mode, where, params)
    return out
