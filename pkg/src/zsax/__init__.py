"""Data series indexes built on sortable, bit-interleaved SAX summaries."""

from .errors import (ConfigError, ConfigMismatch, CorruptHeader, CorruptRun, EmptyIndex, EmptyWindow, IoFailure,
                     LengthMismatch, OutOfBounds, OutOfOrderInput, ShapeMismatch, WidthMismatch, ZsaxError)
from .extsort import MemoryBudget, external_sort
from .lsm import LsmIndex, approx_search_lsm, bulk_load_lsm, exact_search_lsm_sims
from .search import Match, SearchState, brute_force
from .series import DataSeries, Query, euclidean_distance, random_walk_generate, z_normalize
from .storage import IoStats, RawFile, fetch_series, write_dataset
from .summarization import (SummaryConfig, gaussian_breakpoints, invert_sum, key_for, mindist, paa,
                            restore_sum, sax)
from .tree import TreeIndex, approx_search, approx_search_window, build_tree, exact_search_sims
from .trie import TrieIndex, approx_search_trie, build_trie, exact_search_trie
from .window import TemporalPartitions, window_query_btp, window_query_pp, window_query_tp

__version__ = "0.1.0"
