"""
Sortable summaries
==================

SAX words sorted as strings scatter similar series; interleaving their bits
(most significant bit of every segment first) puts them next to each other.
"""

import numpy as np

from zsax.summarization import SummaryConfig, keys_for_rows, paa_rows, sax_rows

# four two-point series, summarized with two segments of three bits each
series = np.array([(0.1, -0.5), (0.1, 0.1), (0.5, -0.5), (0.8, 0.1)])
cfg = SummaryConfig(w=2, c=3, n=2)
symbols = sax_rows(paa_rows(series, cfg), cfg.table)
words = ["".join("abcdefgh"[s] for s in row) for row in symbols]
print("SAX words:", words)

# lexicographic order keeps the input order here
print("sorted as strings:", sorted(words))

# z-order keys pair up the series whose values are closest
keys = keys_for_rows(series, cfg)[:, 0]
order = np.argsort(keys)
print("sorted by key:    ", [words[i] for i in order])
for i in order:
    print(f"  {words[i]}  key={keys[i]:06b}  values={series[i]}")
