import json
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import fresh_queries, make_dataset
from zsax.errors import ConfigError, CorruptRun, EmptyIndex
from zsax.lsm import LsmIndex, approx_search_lsm, bulk_load_lsm, exact_search_lsm_sims
from zsax.search import SearchState, brute_force
from zsax.series import random_walk_block
from zsax.storage import IoStats
from zsax.summarization import SummaryConfig
from zsax.tree import approx_search, build_tree, exact_search_sims

SMALL = SummaryConfig(w=4, c=4, n=16)
CFG = SummaryConfig()


def walks(count, n=16, seed=0):
    return random_walk_block(count, n, np.random.default_rng(seed)).astype(np.float32).astype(np.float64)


def empty_lsm(tmp_path, buffer_records, cfg=SMALL, **kw):
    return LsmIndex.create(tmp_path / "lsm", cfg, IoStats(block_size_records=8), buffer_records=buffer_records,
                           leaf_size=kw.pop("leaf_size", 8), **kw)


def check_disjoint(idx):
    runs = idx.runs_newest_first()
    for newer, older in zip(runs, runs[1:]):
        assert newer.level < older.level
        assert older.max_ts < newer.min_ts
    if idx.buffered and runs:
        assert runs[0].max_ts < idx.buffer_view().min_ts


def test_one_flush_makes_one_run(tmp_path):
    idx = empty_lsm(tmp_path, 4)
    idx.insert_many(walks(4))
    assert idx.run_count == 1 and idx.buffered == 0
    assert idx.runs_newest_first()[0].level == 0


def test_sixteen_inserts_run_bound(tmp_path):
    idx = empty_lsm(tmp_path, 4)
    for row in walks(16):
        idx.insert(row)
    assert idx.run_count <= math.log2(16 / 4) + 1
    assert idx.count == 16
    check_disjoint(idx)


def test_capacities_grow_by_ratio(tmp_path):
    idx = empty_lsm(tmp_path, 5)
    assert [idx.capacity(i + 1) / idx.capacity(i) for i in range(6)] == [2.0] * 6
    idx3 = LsmIndex.create(tmp_path / "r3", SMALL, IoStats(), buffer_records=5, size_ratio=3)
    assert idx3.capacity(2) == 45
    with pytest.raises(ConfigError):
        LsmIndex.create(tmp_path / "bad", SMALL, IoStats(), buffer_records=5, size_ratio=1)
    with pytest.raises(ConfigError):
        LsmIndex.create(tmp_path / "bad2", SMALL, IoStats(), buffer_records=0)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 300), st.sampled_from([1, 2, 3, 4, 7]), st.integers(1, 50))
def test_run_and_merge_bounds(tmp_path_factory, total, m, step):
    idx = empty_lsm(tmp_path_factory.mktemp("b"), m)
    data = walks(total, seed=total)
    for i in range(0, total, step):
        idx.insert_many(data[i:i + step])
    bound = math.ceil(math.log2(max(total / m, 1)))
    assert idx.run_count <= bound + 1
    assert idx.max_merge_depth() <= bound
    assert idx.count == total
    check_disjoint(idx)
    for info in idx.runs_newest_first():
        assert info.count <= idx.capacity(info.level)
        keys = info.index.snapshot.sortable
        assert list(keys) == sorted(keys)
    idx.close()


def test_read_your_writes(tmp_path):
    idx = empty_lsm(tmp_path, 7)
    data = walks(120, seed=1)
    queries = walks(10, seed=2)
    for i in range(0, 120, 11):
        idx.insert_many(data[i:i + 11])
        seen = data[:i + 11]
        for q in queries[:3]:
            m = exact_search_lsm_sims(q, idx)
            j, d = brute_force(seen, q, np.arange(1, seen.shape[0] + 1))
            assert abs(m.distance - d) <= 1e-6 and m.timestamp == j + 1
        newest = seen[-1]
        assert approx_search_lsm(newest, idx).distance == 0.0


def test_bulk_load_single_run_matches_tree(tmp_path):
    path, values = make_dataset(tmp_path, 3000, seed=31)
    tree = build_tree(path, CFG, tmp_path / "t.ctre", leaf_size=300, fill=1.0)
    idx = bulk_load_lsm(path, CFG, tmp_path / "lsm", buffer_records=100, leaf_size=300)
    assert idx.run_count == 1 and idx.buffered == 0
    assert idx.runs_newest_first()[0].level == math.ceil(math.log2(3000 / 100))
    for q in fresh_queries(6, seed=32):
        a, b = exact_search_sims(q, tree), exact_search_lsm_sims(q, idx)
        assert a.distance == b.distance and a.offset == b.offset
        assert approx_search(q, tree, 1).distance == approx_search_lsm(q, idx, 1).distance


def test_multi_run_approx_not_worse_than_any_run(tmp_path):
    idx = empty_lsm(tmp_path, 16, leaf_size=4)
    idx.insert_many(walks(200, seed=3))
    idx.insert_many(walks(9, seed=4))
    assert idx.run_count > 1 and idx.buffered
    for q in walks(10, seed=5):
        best = approx_search_lsm(q, idx, 2).distance
        for info in idx.runs_newest_first():
            assert best <= approx_search(q, info.index, 2).distance


def test_window_covering_everything_equals_plain(tmp_path):
    idx = empty_lsm(tmp_path, 10)
    data = walks(95, seed=6)
    idx.insert_many(data)
    for q in walks(5, seed=7):
        a = exact_search_lsm_sims(q, idx)
        b = exact_search_lsm_sims(q, idx, window=1000)
        assert a.distance == b.distance and a.offset == b.offset


def test_window_skips_old_runs(tmp_path):
    path, values = make_dataset(tmp_path, 9000, seed=33)
    stats = IoStats(block_size_records=500)
    idx = bulk_load_lsm(path, CFG, tmp_path / "lsm", stats=stats, buffer_records=250, leaf_size=500)
    extra = walks(1000, 256, seed=34)
    idx.insert_many(extra)
    allv = np.concatenate([values, extra])
    ts = np.arange(1, allv.shape[0] + 1)
    old = [r for r in idx.runs_newest_first() if r.max_ts <= 9000]
    assert old
    for q in fresh_queries(5, seed=35):
        state = SearchState()
        m = exact_search_lsm_sims(q, idx, window=1000, state=state)
        i, d = brute_force(allv, q, ts, floor=allv.shape[0] - 1000)
        assert abs(m.distance - d) <= 1e-6 and m.timestamp == i + 1
        assert all(id(r.index) not in state.seen for r in old)
        assert state.visited_records <= 1000


def test_manifest_roundtrip_and_checksums(tmp_path):
    idx = empty_lsm(tmp_path, 6)
    data = walks(50, seed=8)
    idx.insert_many(data)
    queries = walks(4, seed=9)
    before = [exact_search_lsm_sims(q, idx).distance for q in queries]
    idx.close()
    doc = json.load(open(tmp_path / "lsm" / "manifest.json"))
    for e in doc["runs"]:
        assert {"path", "min_ts", "max_ts", "count", "checksum", "level"} <= set(e)
        assert os.path.exists(tmp_path / "lsm" / e["path"])
    assert sum(e["count"] for e in doc["runs"]) == 50
    again = LsmIndex.open(tmp_path / "lsm")
    assert [exact_search_lsm_sims(q, again).distance for q in queries] == before
    again.insert_many(walks(3, seed=10))
    assert again.max_ts == 53
    again.close(seal_buffer=False)
    doc["runs"][0]["checksum"] ^= 1
    open(tmp_path / "lsm" / "manifest.json", "w").write(json.dumps(doc))
    with pytest.raises(CorruptRun):
        LsmIndex.open(tmp_path / "lsm")


def test_only_run_files_remain(tmp_path):
    idx = empty_lsm(tmp_path, 3)
    idx.insert_many(walks(40, seed=11))
    idx.close()
    files = sorted(os.listdir(tmp_path / "lsm"))
    runs = [f for f in files if f.endswith(".ctre")]
    assert len(runs) == idx.run_count
    assert set(files) - set(runs) == {"manifest.json", "series.ccnt"}


def test_materialized_lsm_same_answers(tmp_path):
    a = LsmIndex.create(tmp_path / "a", SMALL, IoStats(), buffer_records=5, leaf_size=4)
    b = LsmIndex.create(tmp_path / "b", SMALL, IoStats(), buffer_records=5, leaf_size=4, materialized=True)
    data = walks(63, seed=12)
    a.insert_many(data)
    b.insert_many(data)
    for ra, rb in zip(a.runs_newest_first(), b.runs_newest_first()):
        np.testing.assert_array_equal(ra.index.snapshot.keys, rb.index.snapshot.keys)
    for q in walks(6, seed=13):
        assert exact_search_lsm_sims(q, a).distance == exact_search_lsm_sims(q, b).distance


def test_empty_and_bad_timestamps(tmp_path):
    idx = empty_lsm(tmp_path, 4)
    with pytest.raises(EmptyIndex):
        exact_search_lsm_sims(walks(1)[0], idx)
    idx.insert_many(walks(2), timestamps=[5, 9])
    with pytest.raises(ConfigError):
        idx.insert_many(walks(1), timestamps=[9])
    with pytest.raises(ConfigError):
        idx.insert_many(np.zeros((1, 8)))
