"""
Bulk loading and nearest-neighbour search
=========================================

Generate random walks, bulk-load a sorted tree and a prefix trie over them,
and compare approximate and exact answers with a linear scan.
"""

import tempfile
from pathlib import Path

import numpy as np

from zsax.search import brute_force
from zsax.series import random_walk_generate
from zsax.storage import IoStats, RawFile, write_dataset
from zsax.summarization import SummaryConfig
from zsax.tree import approx_search, build_tree, exact_search_sims
from zsax.trie import build_trie, exact_search_trie

work = Path(tempfile.mkdtemp(prefix="zsax-demo-"))
cfg = SummaryConfig(w=16, c=8, n=256)

# 20k z-normalized random walks on disk, stored as float32
raw_path = work / "walks.ccnt"
write_dataset(raw_path, random_walk_generate(20_000, 256, seed=1), 256, IoStats())
raw = RawFile.open(raw_path, IoStats())
data = raw.read_records(0, raw.count)["series"].astype(np.float64)
raw.close()

# bottom-up bulk load; the counters follow 1000-record blocks
stats = IoStats(block_size_records=1000)
tree = build_tree(raw_path, cfg, work / "walks.ctre", leaf_size=1000, fill=0.97, stats=stats)
print(f"tree: {len(tree.leaf_counts())} leaves, "
      f"{stats.blocks_read} block reads + {stats.blocks_written} block writes")

trie = build_trie(raw_path, cfg, work / "walks.ctri", leaf_size=1000)
print(f"trie: {len(trie.leaf_counts())} leaves, mean utilization {trie.utilization():.2f}")

# approximate answers improve with the number of neighbouring leaves read
rng = np.random.default_rng(2)
queries = [s.values for s in random_walk_generate(20, 256, seed=3)]
for radius in (1, 4, 16):
    d = np.mean([approx_search(q, tree, radius=radius).distance for q in queries])
    print(f"approximate, radius {radius:2d}: mean distance {d:.3f}")

# exact search agrees with the scan and only fetches unpruned records
for q in queries[:5]:
    before = stats.records_fetched
    m = exact_search_sims(q, tree)
    fetched = stats.records_fetched - before
    ref = brute_force(data, q)[1]
    print(f"exact {m.distance:.4f} (scan {ref:.4f}, trie {exact_search_trie(q, trie).distance:.4f}), "
          f"fetched {fetched} of {tree.count}")

tree.close()
trie.close()
