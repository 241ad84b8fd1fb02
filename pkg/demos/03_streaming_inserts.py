"""
Inserts into a log-structured index
===================================

New series land in a memory buffer. Full buffers become sorted runs that merge
down levels of doubling size, so the number of runs stays logarithmic and
queries always see every insert.
"""

import tempfile
from pathlib import Path

import numpy as np

from zsax.lsm import LsmIndex, exact_search_lsm_sims
from zsax.series import random_walk_block
from zsax.storage import IoStats
from zsax.summarization import SummaryConfig

work = Path(tempfile.mkdtemp(prefix="zsax-demo-"))
stats = IoStats(block_size_records=128)
idx = LsmIndex.create(work / "lsm", SummaryConfig(), stats, buffer_records=128, size_ratio=2, leaf_size=256)

rng = np.random.default_rng(0)
for step in range(1, 21):
    batch = random_walk_block(300, 256, rng)
    idx.insert_many(batch)
    # the newest series is found straight away (distance is float32 rounding only)
    m = exact_search_lsm_sims(batch[-1], idx)
    levels = [r.level for r in idx.runs_newest_first()]
    print(f"after {idx.count:5d} inserts: runs at levels {levels}, {idx.buffered:3d} buffered, "
          f"newest found at distance {m.distance:.1e}")

print(f"merges {idx.merges}, deepest merge chain {idx.max_merge_depth()}, "
      f"blocks written {stats.blocks_written}")
idx.close()

# reopening reads the manifest and checks every run against its checksum
again = LsmIndex.open(work / "lsm")
print(f"reopened: {again.count} entries in {again.run_count} runs")
again.close(seal_buffer=False)
