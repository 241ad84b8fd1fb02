"""
Queries over the most recent insertions
=======================================

Three ways to answer "nearest neighbour among the last W series":
filter after a full search, search one index per time slice, or search
log-structured runs newest first, skipping runs older than the window.
"""

import shutil
import tempfile
from pathlib import Path

import numpy as np

from zsax.extsort import MemoryBudget
from zsax.lsm import bulk_load_lsm
from zsax.series import random_walk_block, random_walk_generate
from zsax.storage import IoStats, RawFile, write_dataset
from zsax.summarization import SummaryConfig
from zsax.tree import build_tree
from zsax.window import TemporalPartitions, window_query_btp, window_query_pp, window_query_tp

work = Path(tempfile.mkdtemp(prefix="zsax-demo-"))
cfg = SummaryConfig()
stats = IoStats(block_size_records=1000)
budget = MemoryBudget(5000)

base = work / "base.ccnt"
write_dataset(base, random_walk_generate(8000, 256, seed=5), 256, IoStats())
for name in ("pp", "tp", "lsm"):
    shutil.copy(base, work / f"{name}.ccnt")

lsm = bulk_load_lsm(work / "lsm.ccnt", cfg, work / "lsm", budget, stats=stats, buffer_records=250)
parts = TemporalPartitions.from_dataset(work / "tp.ccnt", cfg, work / "tp", stats, budget, buffer_records=250)
raw = RawFile.open(work / "pp.ccnt", stats, writable=True)

# five batches of fresh series arrive; the plain tree is rebuilt after each
rng = np.random.default_rng(6)
for b in range(5):
    block = random_walk_block(1000, 256, rng)
    lsm.insert_many(block)
    parts.insert_many(block)
    recs = np.zeros(1000, dtype=raw.dtype)
    recs["series"] = block
    recs["ts"] = np.arange(raw.count + 1, raw.count + 1001)
    raw.append_records(recs)
raw.flush()
tree = build_tree(raw, cfg, work / "pp.ctre", budget=budget, stats=stats)
print(f"{tree.count} series; {lsm.run_count} runs; {len(parts.partitions)} partitions")

for window in (200, 1000, 5000):
    fetched = {"post-filter": 0, "partitions": 0, "bounded": 0}
    for q in random_walk_block(10, 256, rng):
        answers = []
        for label, fn, idx in (("post-filter", window_query_pp, tree), ("partitions", window_query_tp, parts),
                               ("bounded", window_query_btp, lsm)):
            before = stats.records_fetched
            answers.append(fn(q, idx, window).timestamp)
            fetched[label] += stats.records_fetched - before
        assert len(set(answers)) == 1
    print(f"W={window:5d}: records fetched over 10 queries {fetched}")

# narrow windows favour the time-aware strategies; once the window covers a
# large share of the data, one big index prunes better than many small ones

tree.close()
parts.close()
lsm.close(seal_buffer=False)
raw.close()
