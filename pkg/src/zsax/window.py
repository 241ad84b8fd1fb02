"""Nearest neighbour among the ``W`` most recent insertions.

Timestamps are insertion numbers and ``now`` is the newest one, so the window
is the half-open range ``(now - W, now]``. Three strategies:

* post-processing: search everything, drop old entries after fetching them;
* temporal partitioning: one small index per buffer flush, each searched
  from scratch when it overlaps the window;
* bounded temporal partitioning: the log-structured index, whose merged runs
  are skipped when too old and pruned with a shared best-so-far otherwise
  (see :func:`zsax.lsm.exact_search_lsm_sims`).
"""

from __future__ import annotations

import math
import os

import numpy as np

from .errors import ConfigError, EmptyIndex, EmptyWindow
from .extsort import MemoryBudget, record_dtype, sort_records
from .lsm import LsmIndex, MemoryRun, exact_search_lsm_sims
from .search import (Match, PreparedQuery, SearchState, approx_positions, evaluate_positions, expand_search,
                     sims_scan, window_floor)
from .storage import IoStats, RawFile
from .summarization import SummaryConfig, keys_for_rows
from .tree import DEFAULT_LEAF_SIZE, TreeIndex, build_tree, write_tree


def _prepared(q, cfg):
    return q if isinstance(q, PreparedQuery) else PreparedQuery.build(q, cfg)


def _check_window(window):
    if window is None or window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")


def window_query_pp(q, idx, window: int, radius: int = 1, state: SearchState | None = None,
                    workers: int = 1) -> Match:
    """Exact search over all entries with the timestamp test applied after each fetch."""
    _check_window(window)
    if isinstance(idx, LsmIndex):
        parts = [idx.buffer_view()] + [r.index for r in idx.runs_newest_first()]
    else:
        parts = [idx]
    parts = [p for p in parts if p.count]
    if not parts:
        raise EmptyIndex("no entries to search")
    pq = _prepared(q, parts[0].cfg)
    state = state if state is not None else SearchState()
    floor = window_floor(idx.max_ts, window)
    for part in parts:
        if state.best is not None:
            break
        expand_search(part, pq, state, radius, floor)
    for part in parts:
        state.partitions_touched += 1
        sims_scan(part, pq, state, post_floor=floor, workers=workers)
    if state.best is None:
        raise EmptyWindow(f"no entry newer than {floor}")
    return state.best


def window_query_btp(q, idx: LsmIndex, window: int, radius: int = 1, state: SearchState | None = None,
                     workers: int = 1) -> Match:
    _check_window(window)
    return exact_search_lsm_sims(q, idx, window=window, radius=radius, state=state, workers=workers)


class TemporalPartitions:
    """A separate tree per buffer flush, oldest first, plus the live buffer."""

    def __init__(self, directory, cfg: SummaryConfig, stats: IoStats, raw: RawFile, *,
                 buffer_records: int, leaf_size: int = DEFAULT_LEAF_SIZE, fill: float = 1.0,
                 materialized: bool = False, max_partitions: int | None = None):
        if buffer_records < 1:
            raise ConfigError(f"buffer must hold at least one record, got {buffer_records}")
        self.directory = os.fspath(directory)
        self.cfg = cfg
        self.stats = stats
        self.raw = raw
        self.buffer_records = buffer_records
        self.leaf_size = leaf_size
        self.fill = fill
        self.materialized = materialized
        self.max_partitions = max_partitions
        self.partitions: list[TreeIndex] = []
        self.dtype = record_dtype(cfg.key_bytes, cfg.n if materialized else 0)
        self.last_ts = 0
        self._recs: list[np.ndarray] = []
        self._series: list[np.ndarray] = []
        self._frozen: MemoryRun | None = None

    @classmethod
    def from_dataset(cls, raw, cfg: SummaryConfig, directory, stats: IoStats | None = None,
                     budget: MemoryBudget | None = None, **params) -> "TemporalPartitions":
        """The existing dataset becomes the first partition; later flushes add more."""
        stats = stats if stats is not None else IoStats()
        os.makedirs(directory, exist_ok=True)
        raw = RawFile.open(raw if not isinstance(raw, RawFile) else raw.path, stats, writable=True)
        tp = cls(directory, cfg, stats, raw, **params)
        if raw.count:
            part = build_tree(raw, cfg, tp._path(), leaf_size=tp.leaf_size, fill=tp.fill, budget=budget,
                              materialized=tp.materialized, stats=stats)
            tp.partitions.append(part)
            tp.last_ts = part.max_ts
        return tp

    def _path(self) -> str:
        return os.path.join(self.directory, f"part-{len(self.partitions):06d}.ctre")

    @property
    def max_ts(self) -> int:
        return self.last_ts

    @property
    def buffered(self) -> int:
        return sum(r.shape[0] for r in self._recs)

    @property
    def count(self) -> int:
        return sum(p.count for p in self.partitions) + self.buffered

    def insert_many(self, block: np.ndarray) -> np.ndarray:
        block = np.asarray(block, dtype=np.float64)
        count = block.shape[0]
        ts = np.arange(self.last_ts + 1, self.last_ts + 1 + count, dtype=np.uint64)
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
            self._recs.append(recs)
            self._series.append(part.astype(np.float32))
            self._frozen = None
            self.last_ts = int(ts[done + take - 1])
            done += take
            if self.buffered >= self.buffer_records:
                self.flush()
        return ts

    def buffer_view(self) -> MemoryRun:
        if self._frozen is None:
            recs = np.concatenate(self._recs) if self._recs else np.zeros(0, dtype=self.dtype)
            series = np.concatenate(self._series) if self._series else np.zeros((0, self.cfg.n), np.float32)
            self._frozen = MemoryRun(recs, self.cfg, max(1, math.ceil(self.leaf_size * self.fill - 1e-9)), series)
        return self._frozen

    def flush(self):
        if not self.buffered:
            return
        if self.max_partitions is not None and len(self.partitions) >= self.max_partitions:
            raise ConfigError(f"partition limit {self.max_partitions} reached")
        self.raw.flush()
        recs = sort_records(np.concatenate(self._recs))
        part = write_tree(self._path(), [recs], recs.shape[0], self.cfg, self.leaf_size, self.fill,
                          self.materialized, self.stats, raw_path=os.path.abspath(self.raw.path),
                          raw=None if self.materialized else self.raw)
        self.partitions.append(part)
        self._recs, self._series, self._frozen = [], [], None

    def close(self):
        self.raw.flush()
        for p in self.partitions:
            p.close()
        self.raw.close()


def window_query_tp(q, partitions, window: int, radius: int = 1, state: SearchState | None = None,
                    workers: int = 1) -> Match:
    """Search every partition that overlaps the window, each one from scratch.

    Entries of a straddling partition are filtered by timestamp before any
    fetch. ``state.partitions_touched`` counts the partitions searched.
    """
    _check_window(window)
    if isinstance(partitions, TemporalPartitions):
        parts = [partitions.buffer_view()] + partitions.partitions[::-1]
        now = partitions.max_ts
    else:
        parts = list(partitions)[::-1]
        now = max((p.max_ts for p in parts if p.count), default=0)
    parts = [p for p in parts if p.count]
    if not parts:
        raise EmptyIndex("no entries to search")
    pq = _prepared(q, parts[0].cfg)
    state = state if state is not None else SearchState()
    floor = window_floor(now, window)
    for part in parts:
        if part.max_ts <= floor:
            continue
        mask = part.snapshot.ts.astype(np.int64) > floor if part.min_ts <= floor else None
        state.partitions_touched += 1
        local = SearchState()
        if isinstance(part, MemoryRun):
            positions = np.flatnonzero(mask) if mask is not None else np.arange(part.count)
        else:
            positions = approx_positions(part.snapshot, pq.key, radius, part.records_per_page, mask)
        evaluate_positions(part, pq, positions, local)
        if not isinstance(part, MemoryRun):
            sims_scan(part, pq, local, mask=mask, workers=workers)
        state.visited_records += local.visited_records
        state.pruned += local.pruned
        if local.best is not None:
            b = local.best
            state.offer(b.distance, b.series, b.timestamp, b.offset)
    if state.best is None:
        raise EmptyWindow(f"no entry newer than {floor}")
    return state.best
