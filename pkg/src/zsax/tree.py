"""Balanced tree over sorted sortable keys, bulk-loaded bottom-up.

File layout (little-endian, keys big-endian)::

    header | raw path | fence levels | leaf region | snapshot

Leaves are fixed-size pages of ``L`` record slots, packed to ``ceil(f*L)``
entries except the last one; the unused slots are the padding left for later
growth. Each page starts with ``count u32 | crc32c u32 | next_leaf i64``.
Fence level 0 holds the smallest key of every leaf, level ``k+1`` the
smallest key of every group of ``fanout`` level-``k`` entries. The snapshot
stores keys, timestamps and raw offsets of all entries in leaf order.
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass

import crc32c
import numpy as np

from .errors import ConfigError, CorruptHeader, EmptyIndex, EmptyWindow, IoFailure
from .extsort import MemoryBudget, make_runs, merge_runs, record_dtype
from .search import (Match, PreparedQuery, SearchState, Snapshot, evaluate_positions, expand_search,
                     radius_span, sims_scan, window_floor)
from .storage import BlockFile, IoStats, RawFile
from .summarization import SummaryConfig, keys_for_rows

TREE_MAGIC = b"CTRE"
TREE_VERSION = 1
# magic, version, w, c, n, L, fill, count, materialized, fanout, per_leaf, leaves,
# fence offset, leaf offset, snapshot offset, raw path length
TREE_HEADER = struct.Struct("<4sIIIIIdQIIIQQQQI")
PAGE_HEADER = struct.Struct("<IIq")

DEFAULT_LEAF_SIZE = 2000
DEFAULT_FILL = 0.97


@dataclass(frozen=True)
class TreeLayout:
    count: int
    leaf_size: int
    fill: float

    @property
    def per_leaf(self) -> int:
        return max(1, math.ceil(self.fill * self.leaf_size - 1e-9))

    @property
    def leaves(self) -> int:
        return max(1, -(-self.count // self.per_leaf))

    @property
    def fanout(self) -> int:
        return max(2, self.leaf_size)

    def level_sizes(self) -> list[int]:
        sizes = [self.leaves]
        while sizes[-1] > 1:
            sizes.append(-(-sizes[-1] // self.fanout))
        return sizes


def records_from_raw(raw: RawFile, cfg: SummaryConfig, materialized: bool, chunk: int):
    """Scan a raw file and yield sort records ``(key, ts, offset[, series])``."""
    if raw.n != cfg.n:
        raise ConfigError(f"dataset series length {raw.n} does not match configuration n={cfg.n}")
    dtype = record_dtype(cfg.key_bytes, cfg.n if materialized else 0)
    for start, recs in raw.iter_chunks(chunk):
        values = recs["series"]
        out = np.zeros(values.shape[0], dtype=dtype)
        out["key"] = keys_for_rows(values.astype(np.float64), cfg)
        if raw.has_timestamps:
            out["ts"] = recs["ts"]
        else:
            out["ts"] = np.arange(start + 1, start + 1 + values.shape[0], dtype=np.uint64)
        out["offset"] = raw.header_size + (start + np.arange(values.shape[0], dtype=np.uint64)) * raw.record_width
        if materialized:
            out["series"] = values
        yield out


class TreeWriter:
    """Streams sorted records into leaf pages; fence keys and snapshot follow."""

    def __init__(self, path, cfg: SummaryConfig, count: int, leaf_size: int, fill: float,
                 materialized: bool, stats: IoStats, raw_path: str = ""):
        if not 0.0 < fill <= 1.0:
            raise ConfigError(f"fill factor must lie in (0, 1], got {fill}")
        if leaf_size < 1:
            raise ConfigError(f"leaf size must be positive, got {leaf_size}")
        self.path = os.fspath(path)
        self.cfg = cfg
        self.layout = TreeLayout(count, leaf_size, fill)
        self.materialized = materialized
        self.dtype = record_dtype(cfg.key_bytes, cfg.n if materialized else 0)
        self.stats = stats
        self.raw_path = raw_path.encode()
        self.page_bytes = PAGE_HEADER.size + leaf_size * self.dtype.itemsize
        self.fence_offset = TREE_HEADER.size + len(self.raw_path)
        fence_entries = sum(self.layout.level_sizes())
        self.leaf_offset = self.fence_offset + fence_entries * cfg.key_bytes
        self.snapshot_offset = self.leaf_offset + self.layout.leaves * self.page_bytes
        self._file = BlockFile(self.path, stats, self.dtype.itemsize, create=True)
        self._pending: list[np.ndarray] = []
        self._held = 0
        self._written = 0
        self._leaf = 0
        self._mins: list[bytes] = []
        self._keys: list[np.ndarray] = []
        self._ts: list[np.ndarray] = []
        self._offs: list[np.ndarray] = []

    def _emit(self, recs: np.ndarray, last: bool):
        slots = np.zeros(self.layout.leaf_size, dtype=self.dtype)
        slots[:recs.shape[0]] = recs
        body = slots.tobytes()
        nxt = -1 if last else self._leaf + 1
        head = PAGE_HEADER.pack(recs.shape[0], crc32c.crc32c(body), nxt)
        self._file.write_at(self.leaf_offset + self._leaf * self.page_bytes, head + body)
        self._mins.append(recs["key"][0].tobytes() if recs.shape[0] else bytes(self.cfg.key_bytes))
        self._keys.append(recs["key"])
        self._ts.append(recs["ts"])
        self._offs.append(recs["offset"])
        self._leaf += 1
        self._written += recs.shape[0]

    def add(self, batch: np.ndarray):
        if batch.dtype != self.dtype:
            raise ConfigError("record layout does not match the tree being written")
        per = self.layout.per_leaf
        self._pending.append(batch)
        self._held += batch.shape[0]
        if self._written + self._held > self.layout.count:
            raise ConfigError(f"more records than announced ({self.layout.count})")
        while self._held > per or (self._held == per and self._written + per < self.layout.count):
            buf = np.concatenate(self._pending)
            self._emit(buf[:per], last=False)
            rest = buf[per:]
            self._pending = [rest]
            self._held = rest.shape[0]

    def finish(self, raw: RawFile | None = None) -> "TreeIndex":
        if self._held:
            self._emit(np.concatenate(self._pending), last=True)
        if self._written != self.layout.count:
            raise ConfigError(f"announced {self.layout.count} records, received {self._written}")
        if self.layout.count == 0:
            self._emit(np.zeros(0, dtype=self.dtype), last=True)
        fences = self._fence_levels()
        self._file.write_at(self.fence_offset, b"".join(fences))
        cat = (lambda xs, dt, shape: np.concatenate(xs) if xs else np.zeros(shape, dt))
        keys = cat(self._keys, np.uint8, (0, self.cfg.key_bytes))
        ts = cat(self._ts, np.uint64, (0,))
        offs = cat(self._offs, np.uint64, (0,))
        self._file.write_at(self.snapshot_offset, keys.tobytes() + ts.astype("<u8").tobytes()
                            + offs.astype("<u8").tobytes())
        self._file.write_at(0, self._header() + self.raw_path)
        self._file.close()
        return TreeIndex(self.path, self.stats, raw, snapshot=Snapshot(keys, ts, offs, self.cfg),
                         fences=[np.array(f, dtype=f"S{self.cfg.key_bytes}") for f in self._fence_lists()])

    def _fence_lists(self) -> list[list[bytes]]:
        levels = [self._mins or [bytes(self.cfg.key_bytes)]]
        while len(levels[-1]) > 1:
            levels.append(levels[-1][::self.layout.fanout])
        return levels

    def _fence_levels(self) -> list[bytes]:
        return [b"".join(level) for level in self._fence_lists()]

    def _header(self) -> bytes:
        lay = self.layout
        return TREE_HEADER.pack(TREE_MAGIC, TREE_VERSION, self.cfg.w, self.cfg.c, self.cfg.n, lay.leaf_size,
                                lay.fill, lay.count, int(self.materialized), lay.fanout, lay.per_leaf,
                                lay.leaves, self.fence_offset, self.leaf_offset, self.snapshot_offset,
                                len(self.raw_path))


def write_tree(path, batches, count: int, cfg: SummaryConfig, leaf_size: int, fill: float,
               materialized: bool, stats: IoStats, raw_path: str = "",
               raw: RawFile | None = None) -> "TreeIndex":
    writer = TreeWriter(path, cfg, count, leaf_size, fill, materialized, stats, raw_path)
    for b in batches:
        writer.add(b)
    return writer.finish(raw)


class TreeIndex:
    """Read side of a bulk-loaded tree: fence levels and snapshot live in memory."""

    def __init__(self, path, stats: IoStats, raw: RawFile | None = None, *,
                 snapshot: Snapshot | None = None, fences: list | None = None):
        self.path = os.fspath(path)
        self.stats = stats
        handle = BlockFile(self.path, stats, TREE_HEADER.size)
        if handle.size < TREE_HEADER.size:
            handle.close()
            raise CorruptHeader("truncated tree header", self.path, 0)
        (magic, version, w, c, n, leaf_size, fill, count, mat, fanout, per_leaf, leaves,
         self.fence_offset, self.leaf_offset, self.snapshot_offset, plen) = TREE_HEADER.unpack(
            handle.read_at(0, TREE_HEADER.size))
        if magic != TREE_MAGIC or version != TREE_VERSION:
            handle.close()
            raise CorruptHeader(f"not a tree index (magic {magic!r})", self.path, 0)
        self.cfg = SummaryConfig(w, c, n)
        self.leaf_size, self.fill, self.count = leaf_size, fill, count
        self.materialized = bool(mat)
        self.fanout, self.per_leaf, self.num_leaves = fanout, per_leaf, leaves
        self.raw_path = handle.read_at(TREE_HEADER.size, plen).decode() if plen else ""
        self.dtype = record_dtype(self.cfg.key_bytes, n if self.materialized else 0)
        self.page_bytes = PAGE_HEADER.size + leaf_size * self.dtype.itemsize
        handle.reconfigure(self.dtype.itemsize)
        self._file = handle
        kb = self.cfg.key_bytes
        layout = TreeLayout(count, leaf_size, fill)
        sizes = layout.level_sizes()
        if fences is None:
            raw_fences = handle.read_at(self.fence_offset, sum(sizes) * kb)
            fences = []
            pos = 0
            for s in sizes:
                fences.append(np.frombuffer(raw_fences[pos:pos + s * kb], dtype=f"S{kb}"))
                pos += s * kb
        self.fences = fences
        self.snapshot = snapshot if snapshot is not None else self._load_snapshot()
        self._raw = raw
        if not self.materialized and raw is None and self.raw_path and count:
            self._raw = RawFile.open(self.raw_path, stats)

    def _load_snapshot(self) -> Snapshot:
        kb, count = self.cfg.key_bytes, self.count
        snap = self._file.read_at(self.snapshot_offset, count * (kb + 16)) if count else b""
        keys = np.frombuffer(snap[:count * kb], dtype=np.uint8).reshape(count, kb)
        ts = np.frombuffer(snap[count * kb:count * (kb + 8)], dtype="<u8")
        offs = np.frombuffer(snap[count * (kb + 8):], dtype="<u8")
        return Snapshot(keys, ts, offs, self.cfg)

    def rebuild_snapshot(self) -> Snapshot:
        """Recover the snapshot from the leaf pages alone."""
        parts = list(self.iter_batches())
        recs = np.concatenate(parts) if parts else np.zeros(0, dtype=self.dtype)
        return Snapshot(recs["key"], recs["ts"], recs["offset"], self.cfg)

    @classmethod
    def open(cls, path, stats: IoStats, raw: RawFile | None = None) -> "TreeIndex":
        return cls(path, stats, raw)

    def close(self):
        self._file.close()

    # --- geometry -----------------------------------------------------------

    @property
    def records_per_page(self) -> int:
        return self.per_leaf

    @property
    def depth(self) -> int:
        return len(self.fences)

    @property
    def min_ts(self) -> int:
        return int(self.snapshot.ts.min()) if self.count else 0

    @property
    def max_ts(self) -> int:
        return int(self.snapshot.ts.max()) if self.count else 0

    def leaf_counts(self) -> list[int]:
        return [min(self.per_leaf, self.count - i * self.per_leaf) for i in range(self.num_leaves)] if self.count else [0]

    def leaf_depths(self) -> list[int]:
        """Depth of every leaf reached by walking the fence levels from the root."""
        depths = [0] * self.num_leaves
        frontier = [(len(self.fences) - 1, 0)]
        while frontier:
            level, g = frontier.pop()
            if level == 0:
                depths[g] = len(self.fences)
                continue
            below = self.fences[level - 1]
            for child in range(g * self.fanout, min((g + 1) * self.fanout, below.shape[0])):
                frontier.append((level - 1, child))
        return depths

    def record_offset(self, position: int) -> int:
        leaf, slot = divmod(position, self.per_leaf)
        return self.leaf_offset + leaf * self.page_bytes + PAGE_HEADER.size + slot * self.dtype.itemsize

    def locate_leaf(self, key: bytes) -> int:
        """Descend the fence levels to the leaf where ``key`` would be inserted."""
        g = 0
        for level in range(len(self.fences) - 2, -1, -1):
            entries = self.fences[level]
            lo, hi = g * self.fanout, min((g + 1) * self.fanout, entries.shape[0])
            j = int(np.searchsorted(entries[lo:hi], np.bytes_(key), side="left")) - 1
            g = lo + max(j, 0)
        return g

    def locate(self, key: bytes) -> int:
        leaf = self.locate_leaf(key)
        lo = leaf * self.per_leaf
        hi = min(lo + self.per_leaf, self.count)
        return self.snapshot.insertion_point(key, lo, hi)

    # --- record access ------------------------------------------------------

    def read_leaf(self, leaf: int, verify: bool = True) -> np.ndarray:
        data = self._file.read_at(self.leaf_offset + leaf * self.page_bytes, self.page_bytes)
        count, crc, _ = PAGE_HEADER.unpack_from(data)
        body = data[PAGE_HEADER.size:]
        if verify and crc32c.crc32c(body) != crc:
            raise IoFailure("leaf checksum mismatch", self.path, self.leaf_offset + leaf * self.page_bytes)
        return np.frombuffer(body, dtype=self.dtype, count=count)

    def iter_batches(self, chunk=None):
        for leaf in range(self.num_leaves if self.count else 0):
            yield self.read_leaf(leaf)

    def fetch(self, position: int) -> np.ndarray:
        if self.materialized:
            rec = np.frombuffer(self._file.read_at(self.record_offset(position), self.dtype.itemsize),
                                dtype=self.dtype)
            self.stats.add(records_fetched=1)
            return rec["series"][0]
        return self._raw.fetch(int(self.snapshot.offsets[position]))

    def fetch_many(self, positions: np.ndarray) -> np.ndarray:
        positions = np.asarray(positions)
        if positions.size == 0:
            return np.zeros((0, self.cfg.n), dtype=np.float32)
        if self.materialized and positions[-1] - positions[0] + 1 == positions.size:
            out = []
            first, last = int(positions[0]), int(positions[-1])
            for leaf in range(first // self.per_leaf, last // self.per_leaf + 1):
                lo = max(first, leaf * self.per_leaf) - leaf * self.per_leaf
                hi = min(last + 1, (leaf + 1) * self.per_leaf) - leaf * self.per_leaf
                start = self.leaf_offset + leaf * self.page_bytes + PAGE_HEADER.size + lo * self.dtype.itemsize
                data = self._file.read_at(start, (hi - lo) * self.dtype.itemsize)
                out.append(np.frombuffer(data, dtype=self.dtype)["series"])
            self.stats.add(records_fetched=positions.size)
            return np.concatenate(out)
        if not self.materialized:
            return self._raw.fetch_many(self.snapshot.offsets[positions])
        return np.stack([self.fetch(int(p)) for p in positions])

    # --- queries ------------------------------------------------------------

    def _require(self):
        if self.count == 0:
            raise EmptyIndex(f"{self.path} holds no entries")

    def approx_search(self, q, radius: int = 1, state: SearchState | None = None) -> Match:
        return approx_search(q, self, radius, state)

    def exact_search(self, q, radius: int = 1, state: SearchState | None = None, workers: int = 1) -> Match:
        return exact_search_sims(q, self, radius, state, workers)


def _prepared(q, cfg):
    return q if isinstance(q, PreparedQuery) else PreparedQuery.build(q, cfg)


def approx_search(q, idx, radius: int = 1, state: SearchState | None = None) -> Match:
    """Best match among the entries within ``radius`` pages of the query's key position."""
    idx._require()
    pq = _prepared(q, idx.cfg)
    state = state if state is not None else SearchState()
    p = idx.locate(pq.key)
    lo, hi = radius_span(p, idx.count, radius, idx.records_per_page)
    evaluate_positions(idx, pq, np.arange(lo, hi), state)
    return state.best


def exact_search_sims(q, idx, radius: int = 1, state: SearchState | None = None, workers: int = 1) -> Match:
    """Exact nearest neighbour: approximate seed, then a skip-sequential SIMS sweep."""
    idx._require()
    pq = _prepared(q, idx.cfg)
    state = state if state is not None else SearchState()
    approx_search(pq, idx, radius, state)
    sims_scan(idx, pq, state, workers=workers)
    return state.best


def approx_search_window(q, idx, window: int, radius: int = 1, state: SearchState | None = None,
                         now: int | None = None) -> Match:
    """Approximate search that widens page by page until it sees an in-window entry.

    Out-of-window entries are fetched and discarded, as post-processing does.
    """
    idx._require()
    pq = _prepared(q, idx.cfg)
    state = state if state is not None else SearchState()
    now = idx.max_ts if now is None else now
    floor = window_floor(now, window)
    expand_search(idx, pq, state, radius, floor)
    if state.best is None:
        raise EmptyWindow(f"no entry newer than {floor}")
    return state.best


def build_tree(raw, cfg: SummaryConfig, out_path, leaf_size: int = DEFAULT_LEAF_SIZE,
               fill: float = DEFAULT_FILL, budget: MemoryBudget | None = None, materialized: bool = False,
               stats: IoStats | None = None, workdir=None) -> TreeIndex:
    """Bulk-load a tree from a raw dataset: summarize, external-sort, pack leaves."""
    stats = stats if stats is not None else IoStats()
    if not 0.0 < fill <= 1.0:
        raise ConfigError(f"fill factor must lie in (0, 1], got {fill}")
    own_raw = not isinstance(raw, RawFile)
    raw = RawFile.open(raw, stats) if own_raw else raw
    budget = budget or MemoryBudget(max(2, raw.count))
    tmp = tempfile.TemporaryDirectory(prefix="zsax-build-") if workdir is None else None
    where = tmp.name if tmp else workdir
    try:
        records = records_from_raw(raw, cfg, materialized, budget.max_records_in_memory)
        runs = make_runs(records, budget, stats, where, prefix="tree")
        merged = merge_runs(runs, budget, stats, where)
        index = write_tree(out_path, merged, raw.count, cfg, leaf_size, fill, materialized, stats,
                           raw_path=os.path.abspath(raw.path), raw=None if materialized else raw)
        for r in runs:
            r.delete()
    finally:
        if tmp:
            tmp.cleanup()
    if materialized and own_raw:
        raw.close()
    return index
