import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import fresh_queries, make_dataset
from zsax.errors import ConfigError, EmptyIndex, IoFailure
from zsax.extsort import MemoryBudget
from zsax.search import SearchState, brute_force
from zsax.storage import IoStats, RawFile
from zsax.summarization import SummaryConfig
from zsax.tree import PAGE_HEADER, TREE_HEADER, TreeIndex, approx_search, approx_search_window, build_tree, \
    exact_search_sims

CFG = SummaryConfig()


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    d = tmp_path_factory.mktemp("tree")
    path, values = make_dataset(d, 6000, seed=11)
    stats = IoStats(block_size_records=500)
    idx = build_tree(path, CFG, d / "t.ctre", leaf_size=500, fill=0.97, budget=MemoryBudget(3000), stats=stats)
    return idx, values, stats, d


def test_packing_small(tmp_path):
    path, _ = make_dataset(tmp_path, 10, seed=1)
    idx = build_tree(path, CFG, tmp_path / "t.ctre", leaf_size=4, fill=1.0)
    assert idx.leaf_counts() == [4, 4, 2]
    assert len(set(idx.leaf_depths())) == 1


def test_five_leaves_for_ten_thousand(tmp_path):
    path, _ = make_dataset(tmp_path, 10_000, seed=2)
    idx = build_tree(path, CFG, tmp_path / "t.ctre", leaf_size=2000, fill=1.0)
    assert idx.num_leaves == 5 and idx.leaf_counts() == [2000] * 5


def test_fill_and_balance(built):
    idx, _, _, _ = built
    counts = idx.leaf_counts()
    need = math.ceil(0.97 * idx.leaf_size)
    assert all(c >= need for c in counts[:-1])
    assert sum(counts) == idx.count == 6000
    depths = idx.leaf_depths()
    assert min(depths) == max(depths) == idx.depth


def test_fences_and_snapshot_alignment(built):
    idx, _, _, _ = built
    for level in idx.fences:
        assert list(level) == sorted(level)
    keys = np.concatenate([b["key"] for b in idx.iter_batches()])
    np.testing.assert_array_equal(keys, idx.snapshot.keys)
    assert list(idx.snapshot.sortable) == sorted(idx.snapshot.sortable)
    assert idx.fences[0].tolist() == [k for k in idx.snapshot.sortable[::idx.per_leaf]]


def test_snapshot_persisted_and_recoverable(built):
    idx, _, _, _ = built
    again = TreeIndex.open(idx.path, IoStats())
    for snap in (again.snapshot, again.rebuild_snapshot()):
        np.testing.assert_array_equal(snap.keys, idx.snapshot.keys)
        np.testing.assert_array_equal(snap.ts, idx.snapshot.ts)
        np.testing.assert_array_equal(snap.offsets, idx.snapshot.offsets)
    again.close()


def test_header_layout(built):
    idx, _, _, _ = built
    head = TREE_HEADER.unpack(open(idx.path, "rb").read(TREE_HEADER.size))
    assert head[0] == b"CTRE" and head[2:5] == (16, 8, 256)
    assert head[5] == 500 and abs(head[6] - 0.97) < 1e-12 and head[7] == 6000 and head[8] == 0


def test_build_touches_counters_and_stays_within_budget(built):
    _, _, stats, _ = built
    assert stats.blocks_read > 0 and stats.blocks_written > 0
    assert stats.transfers <= 8 * math.ceil(6000 / 500)


def test_exact_matches_oracle(built):
    idx, values, _, _ = built
    ts = np.arange(1, values.shape[0] + 1)
    for q in fresh_queries(25, seed=3):
        state = SearchState()
        m = exact_search_sims(q, idx, state=state)
        i, d = brute_force(values, q, ts)
        assert abs(m.distance - d) <= 1e-6
        assert m.timestamp == i + 1
        # skip-sequential: each record is fetched once, raw offsets strictly increase
        pos = state.fetch_positions
        assert len(pos) == len(set(pos))
        offs = idx.snapshot.offsets[pos]
        assert np.all(np.diff(offs.astype(np.int64)) > 0)
        assert len(pos) < idx.count


def test_pruning_is_sound(built):
    idx, _, _, _ = built
    q = fresh_queries(1, seed=4)[0]
    state = SearchState()
    m = exact_search_sims(q, idx, state=state)
    from zsax.search import PreparedQuery
    md = idx.snapshot.mindists(PreparedQuery.build(q, CFG).means)
    touched = np.zeros(idx.count, bool)
    touched[state.fetch_positions] = True
    touched[state.seen[id(idx)]] = True
    assert np.all(md[~touched] >= m.distance - 1e-12)


def test_workers_do_not_change_results(built):
    idx, _, _, _ = built
    for q in fresh_queries(5, seed=5):
        a, b = SearchState(), SearchState()
        ma = exact_search_sims(q, idx, state=a, workers=1)
        mb = exact_search_sims(q, idx, state=b, workers=4)
        assert ma.distance == mb.distance and ma.offset == mb.offset
        assert a.fetch_positions == b.fetch_positions


def test_approx_on_indexed_series_is_zero(built):
    idx, values, _, _ = built
    for i in (0, 17, 2999, 5999):
        assert approx_search(values[i], idx, 1).distance == 0.0


def test_full_radius_equals_brute_force(built):
    idx, values, _, _ = built
    q = fresh_queries(1, seed=6)[0]
    m = approx_search(q, idx, radius=idx.num_leaves + 1)
    assert abs(m.distance - brute_force(values, q)[1]) <= 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_radius_is_monotone(built, seed, r):
    idx, values, _, _ = built
    q = fresh_queries(1, seed=seed)[0]
    small = approx_search(q, idx, r).distance
    large = approx_search(q, idx, r + 3).distance
    exact = brute_force(values, q)[1]
    assert exact - 1e-9 <= large <= small


def test_far_query_still_exact(built):
    idx, values, _, _ = built
    q = np.full(256, 4.0)
    q[:128] = -4.0
    state = SearchState()
    m = exact_search_sims(q, idx, state=state)
    assert abs(m.distance - brute_force(values, q)[1]) <= 1e-6
    assert state.visited_records < idx.count


def test_materialized_same_keys_and_answers(tmp_path):
    path, values = make_dataset(tmp_path, 1500, seed=7)
    a = build_tree(path, CFG, tmp_path / "a.ctre", leaf_size=200, fill=0.97)
    b = build_tree(path, CFG, tmp_path / "b.ctre", leaf_size=200, fill=0.97, materialized=True)
    np.testing.assert_array_equal(a.snapshot.keys, b.snapshot.keys)
    assert b.dtype.itemsize - a.dtype.itemsize == 256 * 4
    for q in fresh_queries(5, seed=8):
        ma, mb = exact_search_sims(q, a), exact_search_sims(q, b)
        assert ma.distance == mb.distance and ma.offset == mb.offset
        assert approx_search(q, a, 2).distance == approx_search(q, b, 2).distance


def test_single_series_and_empty(tmp_path):
    path, values = make_dataset(tmp_path, 1, seed=9)
    idx = build_tree(path, CFG, tmp_path / "one.ctre")
    q = fresh_queries(1)[0]
    m = exact_search_sims(q, idx)
    assert m.timestamp == 1 and abs(m.distance - np.linalg.norm(values[0] - q)) < 1e-9
    empty = RawFile.create(tmp_path / "e.ccnt", 256, IoStats())
    empty.close()
    idx = build_tree(tmp_path / "e.ccnt", CFG, tmp_path / "e.ctre")
    with pytest.raises(EmptyIndex):
        exact_search_sims(q, idx)


def test_window_of_one_returns_newest(built):
    idx, values, _, _ = built
    q = fresh_queries(1, seed=12)[0]
    m = approx_search_window(q, idx, window=1)
    assert m.timestamp == 6000
    np.testing.assert_array_equal(m.series, values[-1].astype(np.float32))


def test_bad_parameters(tmp_path):
    path, _ = make_dataset(tmp_path, 10)
    with pytest.raises(ConfigError):
        build_tree(path, CFG, tmp_path / "t.ctre", fill=0.0)
    with pytest.raises(ConfigError):
        build_tree(path, SummaryConfig(n=128, w=16), tmp_path / "t.ctre")


def test_corrupt_leaf_detected(tmp_path):
    path, _ = make_dataset(tmp_path, 300, seed=13)
    idx = build_tree(path, CFG, tmp_path / "t.ctre", leaf_size=100, fill=1.0)
    pos = idx.leaf_offset + idx.page_bytes + PAGE_HEADER.size + 5
    idx.close()
    data = bytearray(open(tmp_path / "t.ctre", "rb").read())
    data[pos] ^= 0xFF
    open(tmp_path / "t.ctre", "wb").write(bytes(data))
    again = TreeIndex.open(tmp_path / "t.ctre", IoStats())
    again.read_leaf(0)
    with pytest.raises(IoFailure):
        again.read_leaf(1)
