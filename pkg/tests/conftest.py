import os

import numpy as np
import pytest

from zsax.series import random_walk_generate
from zsax.storage import IoStats, RawFile, write_dataset


def make_dataset(directory, count, seed=0, n=256, name="series.ccnt", timestamps=True):
    """Write ``count`` random walks; returns the path and the stored values as float64."""
    path = os.path.join(directory, name)
    write_dataset(path, random_walk_generate(count, n, seed), n, IoStats(), timestamps=timestamps)
    raw = RawFile.open(path, IoStats())
    values = raw.read_records(0, raw.count)["series"].astype(np.float64)
    raw.close()
    return path, values


def fresh_queries(count, n=256, seed=99):
    return np.array([s.values for s in random_walk_generate(count, n, seed)])


@pytest.fixture
def small_data(tmp_path):
    return make_dataset(tmp_path, 3000, seed=5)
