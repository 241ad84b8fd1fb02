"""Search machinery shared by every sorted index organization.

Each index keeps a *snapshot*: the sortable keys, timestamps and raw offsets
of all its entries, in the same order as the entries sit on disk. Exact
search sweeps lower bounds over the snapshot and then fetches only the
entries that could still beat the best-so-far, in snapshot order, so the
disk is read skip-sequentially.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConfigMismatch
from .series import DataSeries
from .summarization import SummaryConfig, deinterleave_rows, key_for, mindist_rows, paa_rows


@dataclass
class Match:
    distance: float
    series: np.ndarray
    timestamp: int
    offset: int

    def __iter__(self):
        yield self.series
        yield self.distance

    def rank(self):
        return (self.distance, self.timestamp, self.offset)


@dataclass
class SearchState:
    """Best-so-far bookkeeping for one query."""

    best: Match | None = None
    visited_records: int = 0
    fetch_positions: list = field(default_factory=list)
    pruned: int = 0
    partitions_touched: int = 0
    seen: dict = field(default_factory=dict, repr=False)

    def mark_seen(self, index, positions: np.ndarray):
        """Remember entries already evaluated so the exact scan skips them."""
        prev = self.seen.get(id(index))
        self.seen[id(index)] = positions if prev is None else np.union1d(prev, positions)

    @property
    def bsf(self) -> float:
        return math.inf if self.best is None else self.best.distance

    def offer(self, distance: float, series, timestamp: int, offset: int) -> bool:
        cand = (distance, int(timestamp), int(offset))
        if self.best is None or cand < self.best.rank():
            self.best = Match(float(distance), np.asarray(series), int(timestamp), int(offset))
            return True
        return False


@dataclass
class PreparedQuery:
    values: np.ndarray
    means: np.ndarray
    key: bytes
    window: int | None = None

    @classmethod
    def build(cls, q, cfg: SummaryConfig) -> "PreparedQuery":
        window = getattr(q, "window", None)
        series = getattr(q, "series", q)
        values = series.values if isinstance(series, DataSeries) else np.asarray(series, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (cfg.n,):
            raise ConfigMismatch(f"query length {values.shape} does not match index length {cfg.n}")
        means = paa_rows(values[None, :], cfg)[0]
        return cls(values, means, key_for(values, cfg), window)

    def distances(self, block: np.ndarray) -> np.ndarray:
        d = np.asarray(block, dtype=np.float64) - self.values
        return np.sqrt(np.einsum("ij,ij->i", d, d))

    def distance(self, series: np.ndarray) -> float:
        # same arithmetic as the batched form, so both paths agree bit for bit
        return float(self.distances(np.asarray(series)[None, :])[0])


class Snapshot:
    """Keys, timestamps and raw offsets of an index's entries in disk order."""

    def __init__(self, keys: np.ndarray, ts: np.ndarray, offsets: np.ndarray, cfg: SummaryConfig):
        self.keys = np.ascontiguousarray(keys, dtype=np.uint8).reshape(-1, cfg.key_bytes)
        self.ts = np.asarray(ts, dtype=np.uint64)
        self.offsets = np.asarray(offsets, dtype=np.uint64)
        self.cfg = cfg

    def __len__(self) -> int:
        return self.keys.shape[0]

    @classmethod
    def empty(cls, cfg: SummaryConfig) -> "Snapshot":
        return cls(np.zeros((0, cfg.key_bytes), np.uint8), np.zeros(0, np.uint64),
                   np.zeros(0, np.uint64), cfg)

    @cached_property
    def sortable(self) -> np.ndarray:
        return self.keys.view(f"S{self.cfg.key_bytes}").ravel()

    @cached_property
    def symbols(self) -> np.ndarray:
        return deinterleave_rows(self.keys, self.cfg)

    def insertion_point(self, key: bytes, lo: int = 0, hi: int | None = None) -> int:
        hi = len(self) if hi is None else hi
        probe = np.array([key], dtype=f"S{self.cfg.key_bytes}")
        return lo + int(np.searchsorted(self.sortable[lo:hi], probe[0], side="left"))

    def mindists(self, query_means: np.ndarray, workers: int = 1) -> np.ndarray:
        """Lower bounds for every entry; chunks may run on separate threads.

        Chunks are contiguous and concatenated back in order, so the result
        does not depend on ``workers``.
        """
        table, n = self.cfg.table, self.cfg.n
        symbols = self.symbols
        if workers <= 1 or len(self) < 2 * workers:
            return mindist_rows(query_means, symbols, table, n)
        bounds = np.linspace(0, len(self), workers + 1).astype(int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda ab: mindist_rows(query_means, symbols[ab[0]:ab[1]], table, n),
                                  zip(bounds[:-1], bounds[1:])))
        return np.concatenate(parts)


def window_floor(now: int, window: int | None) -> int | None:
    """Timestamps strictly above the returned value are inside the window."""
    if window is None:
        return None
    return now - window


def in_window(ts: np.ndarray, floor: int | None) -> np.ndarray | None:
    if floor is None:
        return None
    return np.asarray(ts, dtype=np.int64) > floor


def radius_span(position: int, count: int, radius: int, per_page: int) -> tuple[int, int]:
    """Entry range covering ``radius`` pages centered on ``position``.

    The range keeps its full length when it would cross an end of the index,
    sliding inwards instead of shrinking, which makes a larger radius always
    cover a smaller one.
    """
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    span = radius * per_page
    if span >= count:
        return 0, count
    lo = position - span // 2
    lo = max(0, min(lo, count - span))
    return lo, lo + span


def approx_positions(snapshot: Snapshot, key: bytes, radius: int, per_page: int,
                     mask: np.ndarray | None = None) -> np.ndarray:
    """Entry positions examined by radius-based approximate search.

    With a mask, only masked-in entries are considered and the radius is
    measured over them.
    """
    if mask is None:
        p = snapshot.insertion_point(key)
        lo, hi = radius_span(p, len(snapshot), radius, per_page)
        return np.arange(lo, hi)
    eligible = np.flatnonzero(mask)
    if eligible.size == 0:
        return eligible
    p = snapshot.insertion_point(key)
    rank = int(np.searchsorted(eligible, p))
    lo, hi = radius_span(rank, eligible.size, radius, per_page)
    return eligible[lo:hi]


def evaluate_positions(index, query: PreparedQuery, positions: np.ndarray, state: SearchState,
                       post_floor: int | None = None):
    """Fetch and compare the given entries; ``post_floor`` discards out-of-window
    entries after they have been fetched."""
    if positions.size == 0:
        return
    state.mark_seen(index, positions)
    block = index.fetch_many(positions)
    snap = index.snapshot
    ts = snap.ts[positions]
    offs = snap.offsets[positions]
    keep = np.ones(positions.size, dtype=bool) if post_floor is None else ts.astype(np.int64) > post_floor
    state.visited_records += int(keep.sum())
    if not keep.any():
        return
    dists = query.distances(block[keep])
    kts, koffs, kblock = ts[keep], offs[keep], block[keep]
    order = np.lexsort((koffs, kts, dists))
    i = order[0]
    state.offer(float(dists[i]), kblock[i], int(kts[i]), int(koffs[i]))


def expand_search(index, query: PreparedQuery, state: SearchState, radius: int, post_floor: int | None):
    """Radius search that keeps widening by one page on each side until it has
    seen an entry above ``post_floor``. Out-of-window entries are fetched and
    then discarded, as post-processing does."""
    per = index.records_per_page
    p = index.snapshot.insertion_point(query.key)
    lo, hi = radius_span(p, index.count, radius, per)
    evaluate_positions(index, query, np.arange(lo, hi), state, post_floor=post_floor)
    while state.best is None and (lo > 0 or hi < index.count):
        nlo, nhi = max(0, lo - per), min(index.count, hi + per)
        evaluate_positions(index, query, np.concatenate((np.arange(nlo, lo), np.arange(hi, nhi))), state,
                           post_floor=post_floor)
        lo, hi = nlo, nhi


def sims_scan(index, query: PreparedQuery, state: SearchState, mask: np.ndarray | None = None,
              post_floor: int | None = None, workers: int = 1):
    """Skip-sequential scan: fetch, in disk order, every entry whose lower
    bound is below the best-so-far.

    ``mask`` drops entries before they are fetched (timestamps are known from
    the snapshot); ``post_floor`` drops them only after fetching.
    """
    snap = index.snapshot
    if len(snap) == 0:
        return
    md = snap.mindists(query.means, workers=workers)
    bound = state.bsf
    cand = np.flatnonzero(md < bound) if math.isfinite(bound) else np.arange(len(snap))
    if mask is not None:
        cand = cand[mask[cand]]
    seen = state.seen.get(id(index))
    if seen is not None:
        cand = cand[~np.isin(cand, seen, assume_unique=True)]
    state.pruned += len(snap) - cand.size
    ts, offs = snap.ts, snap.offsets
    if not getattr(index, "materialized", True):
        # leaves hold raw offsets: visit the raw file front to back instead
        cand = cand[np.argsort(offs[cand], kind="stable")]
    for i in cand:
        if md[i] >= state.bsf:
            state.pruned += 1
            continue
        series = index.fetch(int(i))
        state.fetch_positions.append(int(i))
        t = int(ts[i])
        if post_floor is not None and t <= post_floor:
            continue
        state.visited_records += 1
        state.offer(query.distance(series), series, t, int(offs[i]))


def brute_force(block: np.ndarray, query, timestamps=None, floor: int | None = None):
    """Linear-scan nearest neighbour; returns ``(index, distance)``.

    Ties go to the lower timestamp, then the lower row.
    """
    values = query.values if hasattr(query, "values") else np.asarray(query, dtype=np.float64)
    block = np.asarray(block, dtype=np.float64)
    idx = np.arange(block.shape[0])
    if floor is not None:
        idx = idx[np.asarray(timestamps, dtype=np.int64) > floor]
    if idx.size == 0:
        raise LookupError("no series inside the window")
    d = np.sqrt(((block[idx] - values) ** 2).sum(axis=1))
    ts = np.asarray(timestamps)[idx] if timestamps is not None else idx
    j = np.lexsort((idx, ts, d))[0]
    return int(idx[j]), float(d[j])
