"""Prefix-split trie over sorted sortable keys, built bottom-up.

Every node stands for a prefix of the interleaved key: a prefix of ``l`` bits
fixes the top ``l // w`` bits of every segment plus one more bit of the first
``l % w`` segments, which is exactly the starred SAX mask of the node. Keys
arrive in sorted order, so the structure is built left to right: a new leaf
per distinct word, joined to the rightmost spine under the deepest ancestor
whose prefix it shares. A compaction pass then folds neighbouring sibling
leaves together while they fit in one page.

File layout (little-endian, keys big-endian)::

    header | raw path | node table (breadth-first) | leaf pages | snapshot

Leaf pages have room for ``L`` records and start with ``count u32 | crc32c u32``.
Leaves are laid out in key order, so the leaf region is one contiguous run.
"""

from __future__ import annotations

import os
import struct
import tempfile
from collections import deque

import crc32c
import numpy as np

from .errors import ConfigError, CorruptHeader, EmptyIndex, IoFailure, OutOfOrderInput
from .extsort import MemoryBudget, RunFile, make_runs, merge_runs, record_dtype
from .search import Match, PreparedQuery, SearchState, Snapshot, evaluate_positions, sims_scan
from .storage import BlockFile, IoStats, RawFile
from .summarization import SummaryConfig
from .tree import DEFAULT_LEAF_SIZE, records_from_raw

TRIE_MAGIC = b"CTRI"
TRIE_VERSION = 1
# magic, version, w, c, n, L, count, materialized, nodes, leaves,
# node table offset, leaf offset, snapshot offset, raw path length
TRIE_HEADER = struct.Struct("<4sIIIIIQIIIQQQI")
NODE_RECORD = struct.Struct("<HBxIIQQq")  # prefix bits, is_leaf, first child, child count, start, end, leaf id
LEAF_HEADER = struct.Struct("<II")


def common_prefix_bits(a: bytes, b: bytes, width: int) -> int:
    """Length of the common prefix of two keys, counted in key bits."""
    pad = len(a) * 8 - width
    x = int.from_bytes(a, "big") ^ int.from_bytes(b, "big")
    return width if x == 0 else len(a) * 8 - x.bit_length() - pad


def segment_bits(prefix_bits: int, w: int) -> tuple[int, ...]:
    """Bits pinned per segment by a key prefix of ``prefix_bits`` bits."""
    return tuple(prefix_bits // w + (1 if j < prefix_bits % w else 0) for j in range(w))


def mask_of(key: bytes, prefix_bits: int, cfg: SummaryConfig) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Starred SAX mask of a node: (bits kept per segment, their values)."""
    value = int.from_bytes(key, "big")
    symbols = [0] * cfg.w
    for pos in range(prefix_bits):
        bit = (value >> (cfg.key_bits - 1 - pos)) & 1
        symbols[pos % cfg.w] = (symbols[pos % cfg.w] << 1) | bit
    return segment_bits(prefix_bits, cfg.w), tuple(symbols)


def format_mask(bits: tuple[int, ...], values: tuple[int, ...], c: int) -> str:
    parts = []
    for b, v in zip(bits, values):
        parts.append((format(v, f"0{b}b") if b else "") + ("*" if b < c else ""))
    return "(" + " ".join(parts) + ")"


class TrieNode:
    __slots__ = ("prefix_bits", "children", "start", "end")

    def __init__(self, prefix_bits: int, start: int, end: int, children=None):
        self.prefix_bits = prefix_bits
        self.children = children
        self.start = start
        self.end = end

    @property
    def is_leaf(self) -> bool:
        return self.children is None

    @property
    def count(self) -> int:
        return self.end - self.start

    def leaves(self):
        if self.is_leaf:
            yield self
            return
        for ch in self.children:
            yield from ch.leaves()

    def nodes(self):
        yield self
        if not self.is_leaf:
            for ch in self.children:
                yield from ch.nodes()

    def __repr__(self):
        kind = "leaf" if self.is_leaf else f"{len(self.children)} children"
        return f"TrieNode(bits={self.prefix_bits}, [{self.start}, {self.end}), {kind})"


class TrieBuilder:
    """Bottom-up construction state: the rightmost root-to-leaf spine."""

    def __init__(self, cfg: SummaryConfig, leaf_size: int):
        if leaf_size < 1:
            raise ConfigError(f"leaf size must be positive, got {leaf_size}")
        self.cfg = cfg
        self.leaf_size = leaf_size
        self.root = TrieNode(0, 0, 0, [])
        self.spine = [self.root]
        self.last_key: bytes | None = None
        self.count = 0
        self.distinct = 0

    def insert_bottom_up(self, key: bytes):
        """Add the next entry of the sorted stream."""
        last = self.last_key
        if last is not None and key < last:
            raise OutOfOrderInput(f"key {key.hex()} arrived after {last.hex()}")
        pos = self.count
        leaf = self.spine[-1]
        if key == last and leaf.count < self.leaf_size:
            leaf.end += 1
        else:
            self.distinct += key != last
            node = TrieNode(self.cfg.key_bits, pos, pos + 1)
            if last is None:
                self.root.children.append(node)
                self.spine.append(node)
            else:
                self.create_up_tree(node, key)
        self.last_key = key
        self.count += 1
        for n in self.spine[:-1]:
            n.end = self.count

    def create_up_tree(self, node: TrieNode, key: bytes):
        """Hang ``node`` under the deepest spine ancestor sharing its prefix."""
        shared = common_prefix_bits(self.last_key, key, self.cfg.key_bits)
        spine = self.spine
        child = spine.pop()  # the previous leaf never adopts children
        while spine[-1].prefix_bits > shared:
            child = spine.pop()
        top = spine[-1]
        if top.prefix_bits == shared:
            top.children.append(node)
        else:
            parent = TrieNode(shared, child.start, node.end, [child, node])
            top.children[-1] = parent
            spine.append(parent)
        spine.append(node)


def compact_subtree(root: TrieNode, keys: np.ndarray, leaf_size: int, width: int) -> int:
    """Fold adjacent sibling leaves together while they fit in one leaf.

    A parent left with a single leaf child takes over its entries and
    becomes a leaf itself. Passes repeat until one performs no merge.
    Returns the number of passes that merged something.
    """
    def prefix(start, end):
        return common_prefix_bits(keys[start].tobytes(), keys[end - 1].tobytes(), width) if end > start else width

    passes = 0
    while True:
        merged = False
        stack = [root]
        order = []
        while stack:
            node = stack.pop()
            if not node.is_leaf:
                order.append(node)
                stack.extend(node.children)
        for node in reversed(order):  # children before parents
            ch = node.children
            i = 0
            while i + 1 < len(ch):
                a, b = ch[i], ch[i + 1]
                if a.is_leaf and b.is_leaf and a.count + b.count <= leaf_size:
                    a.end = b.end
                    a.prefix_bits = prefix(a.start, a.end)
                    del ch[i + 1]
                    merged = True
                else:
                    i += 1
            if len(ch) == 1 and ch[0].is_leaf:
                node.children = None
                merged = True
        if not merged:
            return passes
        passes += 1


def build_skeleton(keys: np.ndarray, cfg: SummaryConfig, leaf_size: int, compact: bool = True) -> TrieBuilder:
    builder = TrieBuilder(cfg, leaf_size)
    for k in keys.view(f"S{cfg.key_bytes}").ravel().tolist():
        builder.insert_bottom_up(k.ljust(cfg.key_bytes, b"\0"))
    if compact:
        compact_subtree(builder.root, keys, leaf_size, cfg.key_bits)
    return builder


def _breadth_first(root: TrieNode) -> list[TrieNode]:
    order, queue = [], deque([root])
    while queue:
        node = queue.popleft()
        order.append(node)
        if not node.is_leaf:
            queue.extend(node.children)
    return order


class TrieIndex:
    """Read side: node table, leaf directory and snapshot are kept in memory."""

    def __init__(self, path, stats: IoStats, raw: RawFile | None = None):
        self.path = os.fspath(path)
        self.stats = stats
        handle = BlockFile(self.path, stats, TRIE_HEADER.size)
        if handle.size < TRIE_HEADER.size:
            handle.close()
            raise CorruptHeader("truncated trie header", self.path, 0)
        (magic, version, w, c, n, leaf_size, count, mat, nodes, leaves, self.node_offset,
         self.leaf_offset, self.snapshot_offset, plen) = TRIE_HEADER.unpack(handle.read_at(0, TRIE_HEADER.size))
        if magic != TRIE_MAGIC or version != TRIE_VERSION:
            handle.close()
            raise CorruptHeader(f"not a trie index (magic {magic!r})", self.path, 0)
        self.cfg = SummaryConfig(w, c, n)
        self.leaf_size, self.count, self.num_leaves = leaf_size, count, leaves
        self.materialized = bool(mat)
        self.raw_path = handle.read_at(TRIE_HEADER.size, plen).decode() if plen else ""
        self.dtype = record_dtype(self.cfg.key_bytes, n if self.materialized else 0)
        self.page_bytes = LEAF_HEADER.size + leaf_size * self.dtype.itemsize
        handle.reconfigure(self.dtype.itemsize)
        self._file = handle

        table = np.frombuffer(handle.read_at(self.node_offset, nodes * NODE_RECORD.size),
                              dtype=np.dtype([("bits", "<u2"), ("leaf", "u1"), ("pad", "u1"),
                                              ("first", "<u4"), ("nchild", "<u4"), ("start", "<u8"),
                                              ("end", "<u8"), ("leaf_id", "<i8")]))
        self.nodes = table
        kb = self.cfg.key_bytes
        snap = handle.read_at(self.snapshot_offset, count * (kb + 16)) if count else b""
        keys = np.frombuffer(snap[:count * kb], dtype=np.uint8).reshape(count, kb)
        ts = np.frombuffer(snap[count * kb:count * (kb + 8)], dtype="<u8")
        offs = np.frombuffer(snap[count * (kb + 8):], dtype="<u8")
        self.snapshot = Snapshot(keys, ts, offs, self.cfg)
        leaf_rows = table[table["leaf"] == 1]
        order = np.argsort(leaf_rows["leaf_id"])
        self.leaf_starts = leaf_rows["start"][order].astype(np.int64)
        self.leaf_ends = leaf_rows["end"][order].astype(np.int64)
        self._raw = raw
        if not self.materialized and raw is None and self.raw_path and count:
            self._raw = RawFile.open(self.raw_path, stats)

    @classmethod
    def open(cls, path, stats: IoStats, raw: RawFile | None = None) -> "TrieIndex":
        return cls(path, stats, raw)

    def close(self):
        self._file.close()

    @property
    def records_per_page(self) -> int:
        return self.leaf_size

    def leaf_counts(self) -> list[int]:
        return (self.leaf_ends - self.leaf_starts).tolist()

    def utilization(self) -> float:
        counts = self.leaf_ends - self.leaf_starts
        return float(counts.mean() / self.leaf_size) if counts.size else 0.0

    def leaf_depths(self) -> list[int]:
        depth = np.zeros(len(self.nodes), dtype=np.int64)
        out = {}
        for i, row in enumerate(self.nodes):
            if row["leaf"]:
                out[int(row["leaf_id"])] = int(depth[i])
            else:
                f = int(row["first"])
                depth[f:f + int(row["nchild"])] = depth[i] + 1
        return [out[k] for k in sorted(out)]

    def node_mask(self, i: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
        row = self.nodes[i]
        key = self.snapshot.keys[int(row["start"])].tobytes() if self.count else bytes(self.cfg.key_bytes)
        return mask_of(key, int(row["bits"]), self.cfg)

    def page_of(self, position: int) -> int:
        return int(np.searchsorted(self.leaf_starts, position, side="right")) - 1

    def read_leaf(self, leaf: int, verify: bool = True) -> np.ndarray:
        at = self.leaf_offset + leaf * self.page_bytes
        head = self._file.read_at(at, LEAF_HEADER.size)
        count, crc = LEAF_HEADER.unpack(head)
        body = self._file.read_at(at + LEAF_HEADER.size, count * self.dtype.itemsize)
        if verify and crc32c.crc32c(body) != crc:
            raise IoFailure("leaf checksum mismatch", self.path, at)
        return np.frombuffer(body, dtype=self.dtype)

    def iter_batches(self, chunk=None):
        for leaf in range(self.num_leaves if self.count else 0):
            yield self.read_leaf(leaf)

    def record_offset(self, position: int) -> int:
        leaf = self.page_of(position)
        slot = position - int(self.leaf_starts[leaf])
        return self.leaf_offset + leaf * self.page_bytes + LEAF_HEADER.size + slot * self.dtype.itemsize

    def fetch(self, position: int) -> np.ndarray:
        if self.materialized:
            rec = np.frombuffer(self._file.read_at(self.record_offset(position), self.dtype.itemsize),
                                dtype=self.dtype)
            self.stats.add(records_fetched=1)
            return rec["series"][0]
        return self._raw.fetch(int(self.snapshot.offsets[position]))

    def fetch_many(self, positions) -> np.ndarray:
        positions = np.asarray(positions)
        if positions.size == 0:
            return np.zeros((0, self.cfg.n), dtype=np.float32)
        if not self.materialized:
            return self._raw.fetch_many(self.snapshot.offsets[positions])
        return np.stack([self.fetch(int(p)) for p in positions])

    def _require(self):
        if self.count == 0:
            raise EmptyIndex(f"{self.path} holds no entries")

    def descend(self, key: bytes) -> int:
        """Node-table row of the leaf reached by following the best-matching prefixes."""
        width = self.cfg.key_bits
        keys = self.snapshot.keys
        point = self.snapshot.insertion_point(key)
        i = 0
        while not self.nodes[i]["leaf"]:
            row = self.nodes[i]
            first, k = int(row["first"]), int(row["nchild"])
            best, best_score = first, None
            for j in range(first, first + k):
                child = self.nodes[j]
                s, e = int(child["start"]), int(child["end"])
                matched = min(common_prefix_bits(key, keys[s].tobytes(), width), int(child["bits"]))
                gap = 0 if s <= point <= e else min(abs(point - s), abs(point - e))
                score = (matched, -gap)
                if best_score is None or score > best_score:
                    best, best_score = j, score
            i = best
        return i

    def approx_search(self, q, state: SearchState | None = None) -> Match:
        return approx_search_trie(q, self, state)

    def exact_search(self, q, state: SearchState | None = None, workers: int = 1) -> Match:
        return exact_search_trie(q, self, state, workers)


def _prepared(q, cfg):
    return q if isinstance(q, PreparedQuery) else PreparedQuery.build(q, cfg)


def approx_search_trie(q, idx: TrieIndex, state: SearchState | None = None) -> Match:
    """Scan the single leaf whose mask best matches the query's key."""
    idx._require()
    pq = _prepared(q, idx.cfg)
    state = state if state is not None else SearchState()
    row = idx.nodes[idx.descend(pq.key)]
    evaluate_positions(idx, pq, np.arange(int(row["start"]), int(row["end"])), state)
    return state.best


def exact_search_trie(q, idx: TrieIndex, state: SearchState | None = None, workers: int = 1) -> Match:
    idx._require()
    pq = _prepared(q, idx.cfg)
    state = state if state is not None else SearchState()
    approx_search_trie(pq, idx, state)
    sims_scan(idx, pq, state, workers=workers)
    return state.best


def write_trie(path, builder: TrieBuilder, batches, cfg: SummaryConfig, materialized: bool,
               stats: IoStats, keys: np.ndarray, ts: np.ndarray, offsets: np.ndarray,
               raw_path: str = "") -> TrieIndex:
    """Lay out the node table, the leaf pages (from ``batches``, in key order) and the snapshot."""
    dtype = record_dtype(cfg.key_bytes, cfg.n if materialized else 0)
    L = builder.leaf_size
    count = builder.count
    nodes = _breadth_first(builder.root)
    leaves = list(builder.root.leaves())
    leaf_id = {id(n): i for i, n in enumerate(leaves)}
    index_of = {id(n): i for i, n in enumerate(nodes)}
    table = bytearray()
    for n in nodes:
        first = index_of[id(n.children[0])] if not n.is_leaf and n.children else 0
        table += NODE_RECORD.pack(n.prefix_bits, int(n.is_leaf), first, 0 if n.is_leaf else len(n.children),
                                  n.start, n.end, leaf_id.get(id(n), -1))
    rpath = raw_path.encode()
    node_offset = TRIE_HEADER.size + len(rpath)
    leaf_offset = node_offset + len(table)
    page_bytes = LEAF_HEADER.size + L * dtype.itemsize
    snapshot_offset = leaf_offset + len(leaves) * page_bytes
    f = BlockFile(path, stats, dtype.itemsize, create=True)
    f.write_at(node_offset, bytes(table))

    pending, held = [], 0
    stream = iter(batches)
    for i, leaf in enumerate(leaves):
        need = leaf.count
        while held < need:
            b = next(stream)
            pending.append(b)
            held += b.shape[0]
        buf = np.concatenate(pending) if len(pending) > 1 else pending[0]
        recs, rest = buf[:need], buf[need:]
        pending, held = [rest], rest.shape[0]
        body = recs.tobytes()
        page = LEAF_HEADER.pack(need, crc32c.crc32c(body)) + body
        f.write_at(leaf_offset + i * page_bytes, page.ljust(page_bytes, b"\0"))
    f.write_at(snapshot_offset, np.ascontiguousarray(keys, dtype=np.uint8).tobytes()
               + np.asarray(ts, dtype="<u8").tobytes() + np.asarray(offsets, dtype="<u8").tobytes())
    f.write_at(0, TRIE_HEADER.pack(TRIE_MAGIC, TRIE_VERSION, cfg.w, cfg.c, cfg.n, L, count, int(materialized),
                                   len(nodes), len(leaves), node_offset, leaf_offset, snapshot_offset,
                                   len(rpath)) + rpath)
    f.close()
    return TrieIndex(path, stats)


def build_trie(raw, cfg: SummaryConfig, out_path, leaf_size: int = DEFAULT_LEAF_SIZE,
               budget: MemoryBudget | None = None, materialized: bool = False,
               stats: IoStats | None = None, workdir=None) -> TrieIndex:
    """Summarize, external-sort, build and compact the skeleton, then write the leaves.

    The skeleton only holds entry ranges, so it stays small; the sorted
    records are streamed to the leaves in one sequential pass. With
    materialized leaves the sorted stream is spooled to a scratch run first,
    because leaf boundaries are only known once compaction is done.
    """
    stats = stats if stats is not None else IoStats()
    own_raw = not isinstance(raw, RawFile)
    raw = RawFile.open(raw, stats) if own_raw else raw
    budget = budget or MemoryBudget(max(2, raw.count))
    tmp = tempfile.TemporaryDirectory(prefix="zsax-trie-") if workdir is None else None
    where = tmp.name if tmp else workdir
    try:
        records = records_from_raw(raw, cfg, materialized, budget.max_records_in_memory)
        runs = make_runs(records, budget, stats, where, prefix="trie")
        dtype = record_dtype(cfg.key_bytes, cfg.n if materialized else 0)
        keys, ts, offs = [], [], []
        spool = None

        def collect():
            for b in merge_runs(runs, budget, stats, where):
                keys.append(b["key"])
                ts.append(b["ts"])
                offs.append(b["offset"])
                yield b

        if materialized:
            spool = RunFile.write(os.path.join(where, "trie-sorted.crun"), collect(), stats, dtype)
        else:
            for _ in collect():
                pass
        cat = (lambda xs, dt, shape: np.concatenate(xs) if xs else np.zeros(shape, dt))
        keys = cat(keys, np.uint8, (0, cfg.key_bytes))
        ts = cat(ts, np.uint64, (0,))
        offs = cat(offs, np.uint64, (0,))
        builder = build_skeleton(keys, cfg, leaf_size)
        if spool is not None:
            batches = spool.iter_batches()
        else:
            batches = iter([_records(dtype, keys, ts, offs)])
        index = write_trie(out_path, builder, batches, cfg, materialized, stats, keys, ts, offs,
                           raw_path=os.path.abspath(raw.path))
        for r in runs:
            r.delete()
        if spool is not None:
            spool.delete()
    finally:
        if tmp:
            tmp.cleanup()
    if not materialized:
        index._raw = raw
    elif own_raw:
        raw.close()
    return index


def _records(dtype, keys, ts, offs) -> np.ndarray:
    out = np.zeros(keys.shape[0], dtype=dtype)
    out["key"] = keys
    out["ts"] = ts
    out["offset"] = offs
    return out
