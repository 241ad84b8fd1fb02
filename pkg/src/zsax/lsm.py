"""Log-structured index: an in-memory buffer over levels of sorted runs.

Level ``i`` holds at most one run of at most ``M * r**i`` entries. A full
buffer is sorted and pushed down like a carry in a binary counter: every
occupied level it cannot fit next to is swept along, and everything carried
is sort-merged into one run at the first level with room for it. Lower
levels therefore always hold newer data than higher ones.

Runs use the tree file format. The run list lives in a JSON manifest that is
replaced atomically, so a crash leaves either the old or the new set of runs.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass

import crc32c
import numpy as np

from .errors import ConfigError, CorruptRun, EmptyIndex, EmptyWindow
from .extsort import MemoryBudget, merge_runs, record_dtype, sort_records
from .search import (Match, PreparedQuery, SearchState, Snapshot, approx_positions, evaluate_positions,
                     sims_scan, window_floor)
from .series import DataSeries
from .storage import BlockFile, IoStats, RawFile
from .summarization import SummaryConfig, keys_for_rows
from .tree import DEFAULT_LEAF_SIZE, TreeIndex, build_tree, write_tree

MANIFEST = "manifest.json"
MANIFEST_VERSION = 1


class MemoryRun:
    """Sorted entries held in memory; reads are free of block transfers."""

    def __init__(self, records: np.ndarray, cfg: SummaryConfig, per_page: int, series: np.ndarray):
        order = np.argsort(records["key"].view(f"S{cfg.key_bytes}").ravel(), kind="stable") \
            if records.shape[0] else np.zeros(0, dtype=np.intp)
        # equal keys keep arrival (= timestamp) order, matching the sort order
        self.records = records[order]
        self.series = np.asarray(series, dtype=np.float32)[order]
        self.cfg = cfg
        self.per_page = per_page
        self.snapshot = Snapshot(self.records["key"], self.records["ts"], self.records["offset"], cfg)

    @property
    def count(self) -> int:
        return self.records.shape[0]

    @property
    def records_per_page(self) -> int:
        return self.per_page

    @property
    def dtype(self):
        return self.records.dtype

    @property
    def min_ts(self) -> int:
        return int(self.records["ts"].min()) if self.count else 0

    @property
    def max_ts(self) -> int:
        return int(self.records["ts"].max()) if self.count else 0

    def _require(self):
        if not self.count:
            raise EmptyIndex("empty buffer")

    def fetch(self, position: int) -> np.ndarray:
        return self.series[position]

    def fetch_many(self, positions) -> np.ndarray:
        return self.series[np.asarray(positions, dtype=np.intp)]

    def iter_batches(self, chunk=None):
        if self.count:
            yield self.records


@dataclass
class RunInfo:
    level: int
    path: str
    min_ts: int
    max_ts: int
    count: int
    checksum: int
    depth: int
    index: TreeIndex | None = None

    def manifest_entry(self, root: str) -> dict:
        return {"level": self.level, "path": os.path.relpath(self.path, root), "min_ts": self.min_ts,
                "max_ts": self.max_ts, "count": self.count, "checksum": self.checksum, "depth": self.depth}


def snapshot_checksum(snap: Snapshot) -> int:
    return crc32c.crc32c(snap.keys.tobytes() + snap.ts.astype("<u8").tobytes()
                         + snap.offsets.astype("<u8").tobytes())


class LsmIndex:
    def __init__(self, directory, cfg: SummaryConfig, stats: IoStats, raw: RawFile, *,
                 buffer_records: int, size_ratio: int = 2, leaf_size: int = DEFAULT_LEAF_SIZE,
                 fill: float = 1.0, materialized: bool = False):
        if buffer_records < 1:
            raise ConfigError(f"buffer must hold at least one record, got {buffer_records}")
        if size_ratio < 2:
            raise ConfigError(f"size ratio must be at least 2, got {size_ratio}")
        self.directory = os.fspath(directory)
        self.cfg = cfg
        self.stats = stats
        self.raw = raw
        self.buffer_records = buffer_records
        self.size_ratio = size_ratio
        self.leaf_size = leaf_size
        self.fill = fill
        self.materialized = materialized
        self.dtype = record_dtype(cfg.key_bytes, cfg.n if materialized else 0)
        self.levels: dict[int, RunInfo] = {}
        self.next_run = 0
        self.last_ts = 0
        self.merges = 0
        self._buf_recs: list[np.ndarray] = []
        self._buf_series: list[np.ndarray] = []
        self._frozen: MemoryRun | None = None

    # --- construction -------------------------------------------------------

    @classmethod
    def create(cls, directory, cfg: SummaryConfig, stats: IoStats | None = None, raw_path=None,
               **params) -> "LsmIndex":
        stats = stats if stats is not None else IoStats()
        os.makedirs(directory, exist_ok=True)
        raw_path = raw_path or os.path.join(directory, "series.ccnt")
        if os.path.exists(raw_path):
            raw = RawFile.open(raw_path, stats, writable=True)
        else:
            raw = RawFile.create(raw_path, cfg.n, stats, timestamps=True)
        idx = cls(directory, cfg, stats, raw, **params)
        if raw.count:
            raise ConfigError("an empty index needs an empty raw log; bulk-load existing data instead")
        idx._write_manifest()
        return idx

    @classmethod
    def open(cls, directory, stats: IoStats | None = None) -> "LsmIndex":
        stats = stats if stats is not None else IoStats()
        handle = BlockFile(os.path.join(directory, MANIFEST), stats, 1)
        doc = json.loads(handle.read_at(0, handle.size))
        handle.close()
        cfg = SummaryConfig(**doc["cfg"])
        raw = RawFile.open(os.path.join(directory, doc["raw_path"]), stats, writable=True)
        idx = cls(directory, cfg, stats, raw, buffer_records=doc["buffer_records"],
                  size_ratio=doc["size_ratio"], leaf_size=doc["leaf_size"], fill=doc["fill"],
                  materialized=doc["materialized"])
        idx.next_run = doc["next_run"]
        idx.last_ts = doc["last_ts"]
        idx.merges = doc["merges"]
        for e in doc["runs"]:
            info = RunInfo(e["level"], os.path.join(directory, e["path"]), e["min_ts"], e["max_ts"],
                           e["count"], e["checksum"], e["depth"])
            info.index = TreeIndex(info.path, stats, None if idx.materialized else raw)
            if snapshot_checksum(info.index.snapshot) != info.checksum:
                raise CorruptRun("run snapshot does not match the manifest checksum", info.path)
            idx.levels[info.level] = info
        return idx

    def _write_manifest(self):
        doc = {
            "version": MANIFEST_VERSION,
            "cfg": {"w": self.cfg.w, "c": self.cfg.c, "n": self.cfg.n},
            "buffer_records": self.buffer_records, "size_ratio": self.size_ratio,
            "leaf_size": self.leaf_size, "fill": self.fill, "materialized": self.materialized,
            "raw_path": os.path.relpath(self.raw.path, self.directory),
            "next_run": self.next_run, "last_ts": self.last_ts, "merges": self.merges,
            "runs": [self.levels[k].manifest_entry(self.directory) for k in sorted(self.levels)],
        }
        data = json.dumps(doc, indent=1, sort_keys=True).encode()
        tmp = os.path.join(self.directory, MANIFEST + ".tmp")
        with BlockFile(tmp, self.stats, 1, create=True) as f:
            f.write_at(0, data)
            f.sync()
        os.replace(tmp, os.path.join(self.directory, MANIFEST))

    def capacity(self, level: int) -> int:
        return self.buffer_records * self.size_ratio ** level

    def _run_path(self) -> str:
        path = os.path.join(self.directory, f"run-{self.next_run:06d}.ctre")
        self.next_run += 1
        return path

    def _install(self, level: int, index: TreeIndex, depth: int) -> RunInfo:
        snap = index.snapshot
        info = RunInfo(level, index.path, int(snap.ts.min()), int(snap.ts.max()), index.count,
                       snapshot_checksum(snap), depth, index)
        self.levels[level] = info
        return info

    def install_bulk(self, index: TreeIndex):
        """Adopt a freshly bulk-loaded run as the level just large enough for it."""
        level = 0
        while self.capacity(level) < index.count:
            level += 1
        self._install(level, index, 0)
        self.last_ts = max(self.last_ts, index.max_ts)
        self._write_manifest()

    # --- insertion ----------------------------------------------------------

    @property
    def max_ts(self) -> int:
        return self.last_ts

    @property
    def buffered(self) -> int:
        return sum(r.shape[0] for r in self._buf_recs)

    def insert(self, series, timestamp: int | None = None) -> int:
        """Append one series; returns its timestamp."""
        values = series.values if isinstance(series, DataSeries) else np.asarray(series, dtype=np.float64)
        return int(self.insert_many(values[None, :], None if timestamp is None else [timestamp])[0])

    def insert_many(self, block: np.ndarray, timestamps=None) -> np.ndarray:
        block = np.asarray(block, dtype=np.float64)
        if block.ndim != 2 or block.shape[1] != self.cfg.n:
            raise ConfigError(f"expected rows of length {self.cfg.n}, got {block.shape}")
        count = block.shape[0]
        if timestamps is None:
            ts = np.arange(self.last_ts + 1, self.last_ts + 1 + count, dtype=np.uint64)
        else:
            ts = np.asarray(timestamps, dtype=np.uint64)
            if ts.shape != (count,) or (count and (ts[0] <= self.last_ts or np.any(np.diff(ts.astype(np.int64)) <= 0))):
                raise ConfigError("timestamps must increase past the newest entry")
        done = 0
        while done < count:
            take = min(count - done, self.buffer_records - self.buffered)
            part = block[done:done + take]
            raw_recs = np.zeros(take, dtype=self.raw.dtype)
            raw_recs["series"] = part
            raw_recs["ts"] = ts[done:done + take]
            first = self.raw.append_records(raw_recs)
            recs = np.zeros(take, dtype=self.dtype)
            recs["key"] = keys_for_rows(part, self.cfg)
            recs["ts"] = ts[done:done + take]
            recs["offset"] = first + np.arange(take, dtype=np.uint64) * self.raw.record_width
            if self.materialized:
                recs["series"] = part
            self._buf_recs.append(recs)
            self._buf_series.append(part.astype(np.float32))
            self._frozen = None
            self.last_ts = int(ts[done + take - 1])
            done += take
            if self.buffered >= self.buffer_records:
                self.flush()
        return ts

    def buffer_view(self) -> MemoryRun:
        """Frozen copy of the buffer, usable as an in-memory run."""
        if self._frozen is None:
            recs = np.concatenate(self._buf_recs) if self._buf_recs else np.zeros(0, dtype=self.dtype)
            series = np.concatenate(self._buf_series) if self._buf_series else np.zeros((0, self.cfg.n), np.float32)
            self._frozen = MemoryRun(recs, self.cfg, max(1, math.ceil(self.leaf_size * self.fill - 1e-9)), series)
        return self._frozen

    def flush(self):
        """Seal the buffer as a run and cascade it down the levels."""
        if not self.buffered:
            return
        fresh = self.buffer_view()
        self.raw.flush()
        carried: list = [fresh]
        depth = 0
        total = fresh.count
        level = 0
        while True:
            occupant = self.levels.get(level)
            if occupant is not None:
                if total + occupant.count <= self.capacity(level):
                    carried.append(occupant)
                    total += occupant.count
                    break
                carried.append(occupant)
                total += occupant.count
                del self.levels[level]
                level += 1
                continue
            if total <= self.capacity(level):
                break
            level += 1
        self.levels.pop(level, None)
        inputs = carried
        if len(inputs) > 1:
            depth = max(c.depth if isinstance(c, RunInfo) else 0 for c in inputs) + 1
            self.merges += 1
        sources = [c.index if isinstance(c, RunInfo) else c for c in inputs]
        # one buffer block per input plus one for output keeps the merge to a single pass
        budget = MemoryBudget((len(sources) + 1) * self.stats.block_size_records)
        with tempfile.TemporaryDirectory(prefix="zsax-lsm-", dir=self.directory) as where:
            merged = merge_runs(sources, budget, self.stats, where) if len(sources) > 1 \
                else iter([sort_records(fresh.records)])
            index = write_tree(self._run_path(), merged, total, self.cfg, self.leaf_size, self.fill,
                               self.materialized, self.stats, raw_path=os.path.abspath(self.raw.path),
                               raw=None if self.materialized else self.raw)
        self._install(level, index, depth)
        self._buf_recs, self._buf_series, self._frozen = [], [], None
        self._write_manifest()
        for c in inputs:
            if isinstance(c, RunInfo):
                c.index.close()
                os.remove(c.path)

    def close(self, seal_buffer: bool = True):
        if seal_buffer:
            self.flush()
        self.raw.flush()
        self._write_manifest()
        for info in self.levels.values():
            info.index.close()
        self.raw.close()

    # --- introspection ------------------------------------------------------

    @property
    def run_count(self) -> int:
        return len(self.levels)

    @property
    def count(self) -> int:
        return sum(r.count for r in self.levels.values()) + self.buffered

    def runs_newest_first(self) -> list[RunInfo]:
        return [self.levels[k] for k in sorted(self.levels)]

    def max_merge_depth(self) -> int:
        """Upper bound on how many merges any single entry has been through."""
        return max((r.depth for r in self.levels.values()), default=0)

    def _require(self):
        if self.count == 0:
            raise EmptyIndex(f"{self.directory} holds no entries")


def bulk_load_lsm(raw, cfg: SummaryConfig, directory, budget: MemoryBudget | None = None,
                  materialized: bool = False, stats: IoStats | None = None, *,
                  buffer_records: int, size_ratio: int = 2, leaf_size: int = DEFAULT_LEAF_SIZE,
                  fill: float = 1.0) -> LsmIndex:
    """External-sort a dataset into a single run that becomes the largest level.

    The dataset file doubles as the append log for later insertions.
    """
    stats = stats if stats is not None else IoStats()
    os.makedirs(directory, exist_ok=True)
    raw = RawFile.open(raw if not isinstance(raw, RawFile) else raw.path, stats, writable=True)
    if not raw.has_timestamps:
        raise ConfigError("a log-structured index needs a dataset with timestamps")
    idx = LsmIndex(directory, cfg, stats, raw, buffer_records=buffer_records, size_ratio=size_ratio,
                   leaf_size=leaf_size, fill=fill, materialized=materialized)
    if raw.count:
        index = build_tree(raw, cfg, idx._run_path(), leaf_size=leaf_size, fill=fill, budget=budget,
                           materialized=materialized, stats=stats, workdir=None)
        idx.install_bulk(index)
    else:
        idx._write_manifest()
    return idx


# --- queries ----------------------------------------------------------------

def _prepared(q, cfg):
    return q if isinstance(q, PreparedQuery) else PreparedQuery.build(q, cfg)


def _window_of(q, window):
    if window is not None:
        return window
    return getattr(q, "window", None)


def _partitions(idx: LsmIndex, floor: int | None):
    """Newest-first (partition, mask) pairs that can hold in-window entries."""
    out = []
    for part in [idx.buffer_view()] + [r.index for r in idx.runs_newest_first()]:
        if not part.count:
            continue
        if floor is not None and part.max_ts <= floor:
            continue
        mask = None
        if floor is not None and part.min_ts <= floor:
            mask = part.snapshot.ts.astype(np.int64) > floor
        out.append((part, mask))
    return out


def approx_search_lsm(q, idx: LsmIndex, radius: int = 1, state: SearchState | None = None,
                      window: int | None = None) -> Match:
    """Radius search in every run plus a scan of the buffer; the best wins."""
    idx._require()
    pq = _prepared(q, idx.cfg)
    state = state if state is not None else SearchState()
    floor = window_floor(idx.max_ts, _window_of(q, window))
    for part, mask in _partitions(idx, floor):
        state.partitions_touched += 1
        if isinstance(part, MemoryRun):
            positions = np.flatnonzero(mask) if mask is not None else np.arange(part.count)
        else:
            positions = approx_positions(part.snapshot, pq.key, radius, part.records_per_page, mask)
        evaluate_positions(part, pq, positions, state)
    if state.best is None:
        raise EmptyWindow(f"no entry newer than {floor}")
    return state.best


def exact_search_lsm_sims(q, idx: LsmIndex, window: int | None = None, radius: int = 1,
                          state: SearchState | None = None, workers: int = 1) -> Match:
    """Exact search over every run, newest first, carrying the best-so-far.

    With a window, runs entirely older than it are never opened and older
    entries inside straddling runs are dropped before any fetch.
    """
    idx._require()
    pq = _prepared(q, idx.cfg)
    state = state if state is not None else SearchState()
    floor = window_floor(idx.max_ts, _window_of(q, window))
    approx_search_lsm(pq, idx, radius, state, window=_window_of(q, window))
    state.partitions_touched = 0
    for part, mask in _partitions(idx, floor):
        state.partitions_touched += 1
        if isinstance(part, MemoryRun):
            continue  # fully evaluated by the approximate pass
        sims_scan(part, pq, state, mask=mask, workers=workers)
    return state.best
