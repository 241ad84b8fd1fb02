"""Instrumented block files and the raw dataset format.

Every byte that an index touches goes through :class:`BlockFile`, which counts
block transfers the way the disk access model does: a file is cut into blocks
of ``B`` records, each handle keeps one block buffered, and touching any other
block costs one transfer. A transfer to a block that does not directly follow
the previously touched one is also counted as a random seek.
"""

from __future__ import annotations

import os
import struct
import threading
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import CorruptHeader, IoFailure, OutOfBounds
from .series import DataSeries

DEFAULT_BLOCK_BYTES = 4 * 1024 * 1024
DEFAULT_BLOCK_RECORDS = DEFAULT_BLOCK_BYTES // (256 * 4)


@dataclass
class IoStats:
    block_size_records: int = DEFAULT_BLOCK_RECORDS
    blocks_read: int = 0
    blocks_written: int = 0
    records_fetched: int = 0
    random_seeks: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        if self.block_size_records < 1:
            raise ValueError("a block must hold at least one record")

    def add(self, **deltas):
        with self._lock:
            for name, value in deltas.items():
                setattr(self, name, getattr(self, name) + value)

    def reset(self):
        with self._lock:
            self.blocks_read = self.blocks_written = 0
            self.records_fetched = self.random_seeks = 0

    @property
    def transfers(self) -> int:
        return self.blocks_read + self.blocks_written

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if not f.name.startswith("_")}

    def copy(self) -> "IoStats":
        return IoStats(**self.as_dict())

    def __sub__(self, other: "IoStats") -> "IoStats":
        d = {k: v - getattr(other, k) for k, v in self.as_dict().items()}
        d["block_size_records"] = self.block_size_records
        return IoStats(**d)


class BlockFile:
    """A file handle that counts block transfers into an :class:`IoStats`.

    ``record_width`` fixes the block size for this file: a block is
    ``block_size_records`` records of this width.
    """

    def __init__(self, path, stats: IoStats, record_width: int, *, create=False, writable=False):
        self.path = os.fspath(path)
        self.stats = stats
        self.record_width = record_width
        self.block_bytes = max(1, stats.block_size_records * record_width)
        flags = os.O_RDWR | os.O_CREAT | os.O_TRUNC if create else (os.O_RDWR if writable else os.O_RDONLY)
        try:
            self._fd = os.open(self.path, flags, 0o644)
        except OSError as exc:
            raise IoFailure(str(exc), self.path) from exc
        self._last_block = -1
        self._read_block = None
        self._write_block = None
        self._lock = threading.Lock()
        self.size = os.fstat(self._fd).st_size

    def _touch(self, first: int, last: int, writing: bool):
        transfers = seeks = 0
        with self._lock:
            for b in range(first, last + 1):
                cached = self._write_block if writing else self._read_block
                if b == cached:
                    continue
                transfers += 1
                if b != self._last_block + 1 and b != self._last_block:
                    seeks += 1
                self._last_block = b
                if writing:
                    self._write_block = b
                    if self._read_block == b:
                        self._read_block = None
                else:
                    self._read_block = b
        if writing:
            self.stats.add(blocks_written=transfers, random_seeks=seeks)
        else:
            self.stats.add(blocks_read=transfers, random_seeks=seeks)

    def reconfigure(self, record_width: int):
        """Switch the record width once a header has revealed it; block 0 stays cached."""
        self.record_width = record_width
        self.block_bytes = max(1, self.stats.block_size_records * record_width)

    def read_at(self, offset: int, size: int) -> bytes:
        if size <= 0:
            return b""
        if offset < 0 or offset + size > self.size:
            raise OutOfBounds(f"read of {size} bytes at {offset} beyond end of {self.path} ({self.size} bytes)")
        self._touch(offset // self.block_bytes, (offset + size - 1) // self.block_bytes, False)
        try:
            data = os.pread(self._fd, size, offset)
        except OSError as exc:
            raise IoFailure(str(exc), self.path, offset) from exc
        if len(data) != size:
            raise IoFailure(f"short read ({len(data)} of {size} bytes)", self.path, offset)
        return data

    def write_at(self, offset: int, data) -> None:
        data = memoryview(data).cast("B")
        if not len(data):
            return
        self._touch(offset // self.block_bytes, (offset + len(data) - 1) // self.block_bytes, True)
        try:
            written = os.pwrite(self._fd, data, offset)
        except OSError as exc:
            raise IoFailure(str(exc), self.path, offset) from exc
        if written != len(data):
            raise IoFailure(f"short write ({written} of {len(data)} bytes)", self.path, offset)
        self.size = max(self.size, offset + len(data))

    def append(self, data) -> int:
        offset = self.size
        self.write_at(offset, data)
        return offset

    def sync(self):
        os.fsync(self._fd)

    def close(self):
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


# --- raw dataset files ------------------------------------------------------

RAW_MAGIC = b"CCNT"
RAW_VERSION = 1
RAW_HEADER = struct.Struct("<4sIIIQ")  # magic, version, n, flags, count
FLAG_TIMESTAMPS = 1


class RawFile:
    """Append-only file of fixed-length float32 series.

    Layout: ``magic "CCNT" | version u32 | n u32 | flags u32 | count u64``
    followed by ``count`` records, each an optional little-endian u64
    timestamp (flags bit 0) and ``n`` little-endian float32 samples.
    """

    header_size = RAW_HEADER.size

    def __init__(self, handle: BlockFile, n: int, flags: int, count: int):
        self._file = handle
        self.n = n
        self.flags = flags
        self.count = count
        self._dirty = False
        fmt = [("series", "<f4", (n,))]
        if self.has_timestamps:
            fmt.insert(0, ("ts", "<u8"))
        self.dtype = np.dtype(fmt)

    @property
    def path(self) -> str:
        return self._file.path

    @property
    def stats(self) -> IoStats:
        return self._file.stats

    @property
    def has_timestamps(self) -> bool:
        return bool(self.flags & FLAG_TIMESTAMPS)

    @property
    def record_width(self) -> int:
        return self.n * 4 + (8 if self.has_timestamps else 0)

    @classmethod
    def create(cls, path, n: int, stats: IoStats, timestamps: bool = True) -> "RawFile":
        flags = FLAG_TIMESTAMPS if timestamps else 0
        width = n * 4 + (8 if timestamps else 0)
        handle = BlockFile(path, stats, width, create=True)
        handle.write_at(0, RAW_HEADER.pack(RAW_MAGIC, RAW_VERSION, n, flags, 0))
        return cls(handle, n, flags, 0)

    @classmethod
    def open(cls, path, stats: IoStats, writable: bool = False) -> "RawFile":
        handle = BlockFile(path, stats, RAW_HEADER.size, writable=writable)
        if handle.size < RAW_HEADER.size:
            handle.close()
            raise CorruptHeader("truncated header", os.fspath(path), 0)
        magic, version, n, flags, count = RAW_HEADER.unpack(handle.read_at(0, RAW_HEADER.size))
        if magic != RAW_MAGIC or version != RAW_VERSION:
            handle.close()
            raise CorruptHeader(f"not a raw series file (magic {magic!r}, version {version})",
                                os.fspath(path), 0)
        width = n * 4 + (8 if flags & FLAG_TIMESTAMPS else 0)
        handle.reconfigure(width)
        expected = RAW_HEADER.size + count * width
        if handle.size < expected:
            handle.close()
            raise CorruptHeader(f"header claims {count} records but file holds {handle.size} bytes",
                                os.fspath(path), 0)
        return cls(handle, n, flags, count)

    def offset_of(self, index: int) -> int:
        return self.header_size + index * self.record_width

    def index_of(self, offset: int) -> int:
        index, rem = divmod(offset - self.header_size, self.record_width)
        if rem or not 0 <= index < self.count:
            raise OutOfBounds(f"offset {offset} is not a record boundary of {self.path}")
        return index

    def append_series(self, s: DataSeries | np.ndarray, timestamp: int | None = None) -> int:
        values = s.values if isinstance(s, DataSeries) else np.asarray(s)
        if values.shape != (self.n,):
            raise ValueError(f"expected a series of length {self.n}, got {values.shape}")
        rec = np.zeros(1, dtype=self.dtype)
        rec["series"][0] = values
        if self.has_timestamps:
            ts = timestamp if timestamp is not None else getattr(s, "timestamp", 0)
            rec["ts"][0] = ts
        return self.append_records(rec)

    def append_records(self, records: np.ndarray) -> int:
        """Append a structured array of records; returns the first record's offset."""
        records = np.asarray(records, dtype=self.dtype)
        offset = self.offset_of(self.count)
        self._file.write_at(offset, records.tobytes())
        self.count += records.shape[0]
        self._dirty = True
        return offset

    def read_records(self, start: int, count: int) -> np.ndarray:
        if start < 0 or start + count > self.count:
            raise OutOfBounds(f"records [{start}, {start + count}) outside [0, {self.count})")
        data = self._file.read_at(self.offset_of(start), count * self.record_width)
        return np.frombuffer(data, dtype=self.dtype)

    def iter_chunks(self, chunk: int):
        """Sequential scan yielding ``(first_index, records)`` pairs."""
        for start in range(0, self.count, chunk):
            yield start, self.read_records(start, min(chunk, self.count - start))

    def fetch(self, offset: int) -> np.ndarray:
        rec = self.read_records(self.index_of(offset), 1)
        self.stats.add(records_fetched=1)
        return rec["series"][0]

    def fetch_many(self, offsets) -> np.ndarray:
        """Fetch records one by one in the given order (each may cost a block read)."""
        offsets = np.asarray(offsets, dtype=np.int64)
        index, rem = np.divmod(offsets - self.header_size, self.record_width)
        if offsets.size and (rem.any() or index.min() < 0 or index.max() >= self.count):
            raise OutOfBounds(f"offsets outside the records of {self.path}")
        out = np.empty((offsets.size, self.n), dtype=np.float32)
        read = self._file.read_at
        width = self.record_width
        skip = 8 if self.has_timestamps else 0
        for k, off in enumerate(offsets.tolist()):
            out[k] = np.frombuffer(read(off, width), dtype="<f4", offset=skip)
        self.stats.add(records_fetched=offsets.size)
        return out

    def flush(self):
        if self._dirty:
            self._file.write_at(0, RAW_HEADER.pack(RAW_MAGIC, RAW_VERSION, self.n, self.flags, self.count))
            self._dirty = False

    def close(self):
        self.flush()
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def fetch_series(raw: RawFile, offset: int) -> DataSeries:
    rec = raw.read_records(raw.index_of(offset), 1)
    raw.stats.add(records_fetched=1)
    ts = int(rec["ts"][0]) if raw.has_timestamps else 0
    return DataSeries(rec["series"][0].astype(np.float64), timestamp=ts)


def append_series(raw: RawFile, s: DataSeries) -> int:
    return raw.append_series(s)


def write_dataset(path, series, n: int, stats: IoStats, timestamps: bool = True,
                  chunk: int = 4096) -> RawFile:
    """Write an iterable of :class:`DataSeries` to a new raw file and close it."""
    raw = RawFile.create(path, n, stats, timestamps=timestamps)
    buf = np.zeros(chunk, dtype=raw.dtype)
    k = 0
    for s in series:
        buf["series"][k] = s.values
        if timestamps:
            buf["ts"][k] = s.timestamp
        k += 1
        if k == chunk:
            raw.append_records(buf)
            k = 0
    if k:
        raw.append_records(buf[:k])
    raw.close()
    return raw
