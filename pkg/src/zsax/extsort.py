"""External sorting of index records under a record-count memory budget.

Records are numpy structured rows ``(key, ts, offset[, series])``. The total
order is key bytes, then timestamp, then raw-file offset.
"""

from __future__ import annotations

import heapq
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .errors import CorruptRun
from .storage import BlockFile, IoStats

RUN_MAGIC = b"CRUN"
RUN_HEADER = struct.Struct("<4sIQII")  # magic, record width, count, key bytes, series length


def record_dtype(key_bytes: int, n: int = 0) -> np.dtype:
    """Sort-record layout; ``n > 0`` embeds the series (materialized payload)."""
    fmt = [("key", "u1", (key_bytes,)), ("ts", "<u8"), ("offset", "<u8")]
    if n:
        fmt.append(("series", "<f4", (n,)))
    return np.dtype(fmt)


def dtype_shape(dtype: np.dtype) -> tuple[int, int]:
    key_bytes = dtype["key"].shape[0]
    n = dtype["series"].shape[0] if "series" in dtype.names else 0
    return key_bytes, n


@dataclass(frozen=True)
class MemoryBudget:
    max_records_in_memory: int

    def __post_init__(self):
        if self.max_records_in_memory < 2:
            raise ValueError("the memory budget must hold at least two records")

    def fan_in(self, block_records: int) -> int:
        """Runs mergeable in one pass: one buffer block per input plus one for output."""
        return max(2, self.max_records_in_memory // block_records - 1)


def sort_order(records: np.ndarray) -> np.ndarray:
    keys = records["key"]
    cols = [records["offset"], records["ts"]] + [keys[:, j] for j in range(keys.shape[1] - 1, -1, -1)]
    return np.lexsort(cols)


def sort_records(records: np.ndarray) -> np.ndarray:
    return records[sort_order(records)]


def composite_keys(records: np.ndarray) -> list:
    """Bytes whose natural order equals the record order (key, ts, offset)."""
    m = records.shape[0]
    kb = records.dtype["key"].shape[0]
    comp = np.empty((m, kb + 16), dtype=np.uint8)
    comp[:, :kb] = records["key"]
    comp[:, kb:kb + 8] = records["ts"].astype(">u8").view(np.uint8).reshape(m, 8)
    comp[:, kb + 8:] = records["offset"].astype(">u8").view(np.uint8).reshape(m, 8)
    # Fixed-width S strings drop trailing NULs, which keeps the order intact.
    return comp.view(f"S{kb + 16}").ravel().tolist()


class RunFile:
    """A sealed, sorted run: ``magic "CRUN" | width u32 | count u64 | key_bytes u32 | n u32``
    followed by packed records with big-endian keys."""

    def __init__(self, path, stats: IoStats, dtype: np.dtype, count: int, handle: BlockFile | None = None):
        self.path = os.fspath(path)
        self.stats = stats
        self.dtype = dtype
        self.count = count
        self._handle = handle

    @classmethod
    def write(cls, path, records: np.ndarray | Iterable[np.ndarray], stats: IoStats,
              dtype: np.dtype | None = None) -> "RunFile":
        kb, n = dtype_shape(records.dtype if isinstance(records, np.ndarray) else dtype)
        handle = BlockFile(path, stats, (dtype or records.dtype).itemsize, create=True)
        if isinstance(records, np.ndarray):
            # count known up front: header and body go out in one sequential write
            dtype = records.dtype
            handle.write_at(0, RUN_HEADER.pack(RUN_MAGIC, dtype.itemsize, records.shape[0], kb, n)
                            + records.tobytes())
            handle.close()
            return cls(path, stats, dtype, records.shape[0])
        handle.write_at(0, RUN_HEADER.pack(RUN_MAGIC, dtype.itemsize, 0, kb, n))
        count = 0
        for chunk in records:
            if chunk.dtype != dtype:
                handle.close()
                raise CorruptRun("record layout changed mid-run", os.fspath(path), handle.size)
            handle.append(chunk.tobytes())
            count += chunk.shape[0]
        handle.write_at(0, RUN_HEADER.pack(RUN_MAGIC, dtype.itemsize, count, kb, n))
        handle.close()
        return cls(path, stats, dtype, count)

    @classmethod
    def open(cls, path, stats: IoStats) -> "RunFile":
        handle = BlockFile(path, stats, RUN_HEADER.size)
        if handle.size < RUN_HEADER.size:
            handle.close()
            raise CorruptRun("truncated run header", os.fspath(path), 0)
        magic, width, count, kb, n = RUN_HEADER.unpack(handle.read_at(0, RUN_HEADER.size))
        if magic != RUN_MAGIC:
            handle.close()
            raise CorruptRun(f"bad run magic {magic!r}", os.fspath(path), 0)
        dtype = record_dtype(kb, n)
        if dtype.itemsize != width:
            handle.close()
            raise CorruptRun(f"record width {width} does not match layout ({dtype.itemsize})",
                             os.fspath(path), 0)
        if handle.size != RUN_HEADER.size + count * width:
            handle.close()
            raise CorruptRun(f"run holds {handle.size} bytes, expected {count} records",
                             os.fspath(path), 0)
        handle.reconfigure(width)
        return cls(path, stats, dtype, count, handle)

    def iter_batches(self, chunk: int | None = None) -> Iterator[np.ndarray]:
        """Sequential read, one block per batch by default."""
        chunk = chunk or self.stats.block_size_records
        handle = self._handle
        self._handle = None
        if handle is None:
            handle = BlockFile(self.path, self.stats, self.dtype.itemsize)
        width = self.dtype.itemsize
        try:
            for start in range(0, self.count, chunk):
                k = min(chunk, self.count - start)
                data = handle.read_at(RUN_HEADER.size + start * width, k * width)
                yield np.frombuffer(data, dtype=self.dtype)
        finally:
            handle.close()

    def read_all(self) -> np.ndarray:
        parts = list(self.iter_batches())
        return np.concatenate(parts) if parts else np.zeros(0, dtype=self.dtype)

    def delete(self):
        if self._handle is not None:
            self._handle.close()
            self._handle = None
        try:
            os.remove(self.path)
        except FileNotFoundError:
            pass


def make_runs(records: Iterable[np.ndarray], budget: MemoryBudget, stats: IoStats,
              workdir, prefix: str = "run") -> list[RunFile]:
    """Cut the record stream into memory-sized chunks, sort each, write each as a run."""
    runs: list[RunFile] = []
    pending: list[np.ndarray] = []
    held = 0
    limit = budget.max_records_in_memory

    def seal():
        nonlocal pending, held
        chunk = sort_records(np.concatenate(pending))
        path = os.path.join(workdir, f"{prefix}-{len(runs):06d}.crun")
        runs.append(RunFile.write(path, chunk, stats))
        pending, held = [], 0

    for batch in records:
        while batch.shape[0]:
            take = min(limit - held, batch.shape[0])
            pending.append(batch[:take])
            held += take
            batch = batch[take:]
            if held == limit:
                seal()
    if held:
        seal()
    return runs


def _kway(sources: list, chunk: int) -> Iterator[np.ndarray]:
    """Heap merge of sorted batch iterators into output batches of ``chunk`` rows."""
    iters = [iter(s) for s in sources]
    batches: list = [None] * len(iters)
    comps: list = [None] * len(iters)
    heap = []
    dtype = None

    def load(i):
        for b in iters[i]:
            if b.shape[0]:
                batches[i] = b
                comps[i] = composite_keys(b)
                return True
        return False

    for i in range(len(iters)):
        if load(i):
            dtype = batches[i].dtype
            heap.append((comps[i][0], i, 0))
    if dtype is None:
        return
    heapq.heapify(heap)
    out = np.empty(chunk, dtype=dtype)
    k = 0
    while heap:
        _, i, pos = heap[0]
        out[k] = batches[i][pos]
        k += 1
        if k == chunk:
            yield out.copy()
            k = 0
        pos += 1
        if pos < batches[i].shape[0]:
            heapq.heapreplace(heap, (comps[i][pos], i, pos))
        elif load(i):
            heapq.heapreplace(heap, (comps[i][0], i, 0))
        else:
            heapq.heappop(heap)
    if k:
        yield out[:k].copy()


def merge_runs(runs: list, budget: MemoryBudget, stats: IoStats, workdir=None,
               chunk: int | None = None) -> Iterator[np.ndarray]:
    """Globally sorted batches from sorted runs.

    ``runs`` may hold anything with ``iter_batches()``. When there are more runs
    than the budget has buffers for, groups are merged into intermediate runs
    first; those intermediates are removed once consumed. Inputs are never
    deleted here.
    """
    chunk = chunk or stats.block_size_records
    fan_in = budget.fan_in(stats.block_size_records)
    level = list(runs)
    owned: list[RunFile] = []
    tmp = None
    generation = 0
    try:
        while len(level) > fan_in:
            if workdir is None and tmp is None:
                tmp = tempfile.TemporaryDirectory(prefix="zsax-merge-")
            where = workdir if workdir is not None else tmp.name
            nxt = []
            for g in range(0, len(level), fan_in):
                group = level[g:g + fan_in]
                if len(group) == 1:
                    nxt.append(group[0])
                    continue
                path = os.path.join(where, f"merge-{generation:03d}-{g // fan_in:06d}.crun")
                dtype = next(r.dtype for r in group)
                out = RunFile.write(path, _kway([r.iter_batches() for r in group], chunk), stats, dtype)
                nxt.append(out)
            for r in level:
                # a leftover run carried into the next pass is still needed
                if r in owned and not any(r is x for x in nxt):
                    r.delete()
                    owned.remove(r)
            owned.extend(r for r in nxt if isinstance(r, RunFile) and r not in runs)
            level = nxt
            generation += 1
        yield from _kway([r.iter_batches() for r in level], chunk)
    finally:
        for r in owned:
            r.delete()
        if tmp is not None:
            tmp.cleanup()


def external_sort(records: Iterable[np.ndarray], budget: MemoryBudget, stats: IoStats,
                  workdir) -> tuple[list[RunFile], Iterator[np.ndarray]]:
    runs = make_runs(records, budget, stats, workdir)
    return runs, merge_runs(runs, budget, stats, workdir)
