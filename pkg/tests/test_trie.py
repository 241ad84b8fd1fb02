import numpy as np
import pytest

from conftest import fresh_queries, make_dataset
from zsax.errors import EmptyIndex, OutOfOrderInput
from zsax.extsort import sort_records
from zsax.search import SearchState, brute_force
from zsax.series import DataSeries
from zsax.storage import IoStats, RawFile, write_dataset
from zsax.summarization import SaxWord, SummaryConfig, invert_sum, keys_for_rows
from zsax.tree import build_tree
from zsax.trie import (TrieBuilder, TrieIndex, approx_search_trie, build_skeleton, build_trie, common_prefix_bits,
                       compact_subtree, exact_search_trie, format_mask, mask_of)

CFG = SummaryConfig()


def kbytes(value, cfg):
    return value.to_bytes(cfg.key_bytes, "big")


def word_key(symbols, cfg):
    return kbytes(invert_sum(SaxWord(tuple(symbols), cfg.c)).value, cfg)


def key_array(keys, cfg):
    return np.frombuffer(b"".join(keys), dtype=np.uint8).reshape(-1, cfg.key_bytes)


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    d = tmp_path_factory.mktemp("trie")
    path, values = make_dataset(d, 4000, seed=21)
    idx = build_trie(path, CFG, d / "t.ctri", leaf_size=400)
    return idx, values, path, d


# values whose segment means land on symbols e=4, c=2, f=5, g=6 with c=3 bits
FOUR = [(0.1, -0.5), (0.5, -0.5), (0.1, 0.1), (0.8, 0.1)]


@pytest.fixture
def four_series(tmp_path):
    cfg = SummaryConfig(w=2, c=3, n=2)
    path = tmp_path / "four.ccnt"
    write_dataset(path, [DataSeries(np.array(s), i + 1) for i, s in enumerate(FOUR)], 2, IoStats())
    return cfg, path


def test_four_series_keys_and_pairs(tmp_path, four_series):
    cfg, path = four_series
    keys = keys_for_rows(np.array(FOUR), cfg)[:, 0]
    assert keys.tolist() == [0b100100, 0b100110, 0b110000, 0b111000]
    idx = build_trie(path, cfg, tmp_path / "four.ctri", leaf_size=2)
    assert idx.leaf_counts() == [2, 2]
    leaves = [np.flatnonzero(idx.nodes["leaf_id"] == i)[0] for i in range(2)]
    assert [idx.snapshot.ts[idx.leaf_starts[i]:idx.leaf_ends[i]].tolist() for i in range(2)] == [[1, 2], [3, 4]]
    assert [format_mask(*idx.node_mask(j), 3) for j in leaves] == ["(10* 01*)", "(1* 1*)"]
    # both leaves hang under one parent whose mask is their common prefix
    parents = [i for i, r in enumerate(idx.nodes) if not r["leaf"] and r["nchild"] == 2]
    assert len(parents) == 1
    assert format_mask(*idx.node_mask(parents[0]), 3) == "(1* *)"


def test_four_series_approx_returns_own_series(tmp_path, four_series):
    cfg, path = four_series
    idx = build_trie(path, cfg, tmp_path / "four.ctri", leaf_size=2)
    m = approx_search_trie(np.array(FOUR[2]), idx)
    assert m.timestamp == 3 and m.distance == pytest.approx(0.0, abs=1e-7)


def test_mask_example_from_two_words():
    cfg = SummaryConfig(w=4, c=2, n=4)
    a, b = word_key((0, 1, 2, 3), cfg), word_key((1, 0, 3, 2), cfg)
    shared = common_prefix_bits(a, b, cfg.key_bits)
    assert format_mask(*mask_of(a, shared, cfg), cfg.c) == "(0* 0* 1* 1*)"
    builder = build_skeleton(key_array(sorted([a, b]), cfg), cfg, leaf_size=1)
    parent = builder.root.children[0]
    assert len(parent.children) == 2 and parent.prefix_bits == shared


def test_single_series_is_one_leaf(tmp_path):
    path, _ = make_dataset(tmp_path, 1)
    idx = build_trie(path, CFG, tmp_path / "one.ctri")
    assert len(idx.nodes) == 1 and idx.nodes[0]["leaf"] == 1 and idx.leaf_counts() == [1]


def test_same_word_shares_a_node():
    cfg = SummaryConfig(w=2, c=3, n=2)
    b = TrieBuilder(cfg, leaf_size=4)
    k = word_key((4, 2), cfg)
    b.insert_bottom_up(k)
    b.insert_bottom_up(k)
    assert b.distinct == 1 and [n.count for n in b.root.leaves()] == [2]


def test_last_bit_difference_gets_a_parent():
    cfg = SummaryConfig(w=2, c=3, n=2)
    b = TrieBuilder(cfg, leaf_size=4)
    b.insert_bottom_up(word_key((4, 2), cfg))
    b.insert_bottom_up(word_key((4, 3), cfg))
    parent = b.root.children[0]
    assert parent.prefix_bits == cfg.key_bits - 1
    assert [n.count for n in parent.children] == [1, 1]
    assert format_mask(*mask_of(word_key((4, 2), cfg), parent.prefix_bits, cfg), 3) == "(100 01*)"


def test_out_of_order_rejected():
    cfg = SummaryConfig(w=2, c=3, n=2)
    b = TrieBuilder(cfg, leaf_size=4)
    b.insert_bottom_up(word_key((4, 3), cfg))
    with pytest.raises(OutOfOrderInput):
        b.insert_bottom_up(word_key((4, 2), cfg))


def _sorted_keys(seed, count=3000, cfg=CFG):
    rng = np.random.default_rng(seed)
    block = np.cumsum(rng.normal(size=(count, cfg.n)), axis=1)
    block = (block - block.mean(1, keepdims=True)) / block.std(1, keepdims=True)
    keys = keys_for_rows(block, cfg)
    order = np.lexsort(keys.T[::-1])
    return keys[order]


@pytest.mark.parametrize("seed", [0, 1])
def test_node_count_equals_distinct_words(seed):
    keys = _sorted_keys(seed)
    b = build_skeleton(keys, CFG, leaf_size=10_000, compact=False)
    distinct = len(set(map(bytes, keys)))
    assert b.distinct == distinct == len(list(b.root.leaves()))


@pytest.mark.parametrize("compact", [False, True])
def test_masks_are_common_prefixes(compact):
    keys = _sorted_keys(2, cfg=SummaryConfig(w=4, c=3, n=16))
    cfg = SummaryConfig(w=4, c=3, n=16)
    b = build_skeleton(keys, cfg, leaf_size=20, compact=compact)
    for node in b.root.nodes():
        if node is b.root or node.count == 0:
            continue
        lcp = common_prefix_bits(keys[node.start].tobytes(), keys[node.end - 1].tobytes(), cfg.key_bits)
        if not node.is_leaf:
            assert node.prefix_bits == lcp
            # children are contiguous and ordered
            assert node.children[0].start == node.start and node.children[-1].end == node.end
            assert all(x.end == y.start for x, y in zip(node.children, node.children[1:]))
        assert node.prefix_bits <= lcp


def test_compaction_merges_small_siblings():
    cfg = SummaryConfig(w=2, c=3, n=2)
    b = TrieBuilder(cfg, leaf_size=2)
    for s in ((4, 2), (4, 3)):
        b.insert_bottom_up(word_key(s, cfg))
    keys = key_array([word_key((4, 2), cfg), word_key((4, 3), cfg)], cfg)
    compact_subtree(b.root, keys, 2, cfg.key_bits)
    assert [n.count for n in b.root.leaves()] == [2]


def test_compaction_respects_capacity():
    cfg = SummaryConfig(w=2, c=3, n=2)
    ks = [word_key((4, 2), cfg)] * 2 + [word_key((4, 3), cfg)]
    b = build_skeleton(key_array(ks, cfg), cfg, leaf_size=2)
    assert sorted(n.count for n in b.root.leaves()) == [1, 2]


def test_compaction_reaches_fixpoint():
    keys = _sorted_keys(3)
    b = build_skeleton(keys, CFG, leaf_size=50)
    assert compact_subtree(b.root, keys, 50, CFG.key_bits) == 0
    assert all(n.count <= 50 for n in b.root.leaves())


def test_prefix_soundness_and_conservation(built):
    idx, values, _, _ = built
    keys = idx.snapshot.keys
    width = CFG.key_bits
    for row in idx.nodes:
        s, e, bits = int(row["start"]), int(row["end"]), int(row["bits"])
        for k in range(s, e):
            assert common_prefix_bits(keys[s].tobytes(), keys[k].tobytes(), width) >= bits
    assert sum(idx.leaf_counts()) == idx.count == values.shape[0]
    assert np.array_equal(idx.leaf_starts[1:], idx.leaf_ends[:-1])
    assert all(c <= idx.leaf_size for c in idx.leaf_counts())


def test_leaves_hold_the_sorted_stream(built):
    idx, values, path, _ = built
    stored = np.concatenate(list(idx.iter_batches()))
    raw = RawFile.open(path, IoStats())
    expect = np.zeros(raw.count, dtype=stored.dtype)
    expect["key"] = keys_for_rows(values, CFG)
    expect["ts"] = np.arange(1, raw.count + 1)
    expect["offset"] = [raw.offset_of(i) for i in range(raw.count)]
    assert stored.tobytes() == sort_records(expect).tobytes()
    # pages sit in key order at increasing file offsets
    offs = [idx.record_offset(int(s)) for s in idx.leaf_starts]
    assert offs == sorted(offs)


def test_exact_and_approx_against_oracle(built):
    idx, values, _, _ = built
    for q in fresh_queries(15, seed=22):
        state = SearchState()
        m = exact_search_trie(q, idx, state)
        i, d = brute_force(values, q)
        assert abs(m.distance - d) <= 1e-6 and m.timestamp == i + 1
        assert approx_search_trie(q, idx).distance >= d - 1e-9


def test_indexed_series_found_at_distance_zero(built):
    idx, values, _, _ = built
    for i in (0, 100, 3999):
        assert approx_search_trie(values[i], idx).distance == 0.0


def test_prefix_split_leaves_are_emptier(built):
    idx, values, path, d = built
    tree = build_tree(path, CFG, d / "cmp.ctre", leaf_size=400, fill=0.97)
    tree_util = np.mean(tree.leaf_counts()) / tree.leaf_size
    assert idx.utilization() < tree_util
    assert idx.num_leaves >= tree.num_leaves


def test_materialized_trie(tmp_path):
    path, values = make_dataset(tmp_path, 800, seed=23)
    a = build_trie(path, CFG, tmp_path / "a.ctri", leaf_size=100)
    b = build_trie(path, CFG, tmp_path / "b.ctri", leaf_size=100, materialized=True)
    np.testing.assert_array_equal(a.snapshot.keys, b.snapshot.keys)
    reopened = TrieIndex.open(tmp_path / "b.ctri", IoStats())
    for q in fresh_queries(4, seed=24):
        assert exact_search_trie(q, a).distance == exact_search_trie(q, reopened).distance


def test_empty_trie(tmp_path):
    raw = RawFile.create(tmp_path / "e.ccnt", 256, IoStats())
    raw.close()
    idx = build_trie(tmp_path / "e.ccnt", CFG, tmp_path / "e.ctri")
    with pytest.raises(EmptyIndex):
        approx_search_trie(fresh_queries(1)[0], idx)
