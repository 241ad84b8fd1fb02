"""Data series primitives: z-normalization, Euclidean distance, random walks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import LengthMismatch

DEFAULT_LENGTH = 256


@dataclass(frozen=True)
class DataSeries:
    values: np.ndarray
    timestamp: int = 0
    constant: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError("a data series is one-dimensional")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class Query:
    series: DataSeries
    window: int | None = None

    def __post_init__(self):
        if self.window is not None and self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")


def _values(s) -> np.ndarray:
    if isinstance(s, DataSeries):
        return s.values
    return np.asarray(s, dtype=np.float64)


def _flat_tolerance(scale):
    # a spread this small is rounding noise from the mean, not signal
    return 8 * np.finfo(np.float64).eps * scale


def z_normalize(series) -> DataSeries:
    """Shift to zero mean and scale to unit population standard deviation.

    A constant series cannot be scaled; it comes back as all zeros with
    ``constant=True`` instead of raising, so flat stretches of a stream do not
    abort ingestion.
    """
    values = _values(series)
    if values.shape[0] < 2:
        raise ValueError("z-normalization needs at least two samples")
    ts = series.timestamp if isinstance(series, DataSeries) else 0
    std = values.std()
    if std <= _flat_tolerance(np.abs(values).max()):
        return DataSeries(np.zeros_like(values), timestamp=ts, constant=True)
    return DataSeries((values - values.mean()) / std, timestamp=ts)


def z_normalize_rows(block: np.ndarray) -> np.ndarray:
    """Row-wise z-normalization of a 2-d array; constant rows become zeros."""
    block = np.asarray(block, dtype=np.float64)
    mean = block.mean(axis=1, keepdims=True)
    std = block.std(axis=1, keepdims=True)
    flat = std <= _flat_tolerance(np.abs(block).max(axis=1, keepdims=True))
    out = (block - mean) / np.where(flat, 1.0, std)
    out[flat[:, 0]] = 0.0
    return out


def euclidean_distance(a, b) -> float:
    x, y = _values(a), _values(b)
    if x.shape != y.shape:
        raise LengthMismatch(f"series lengths differ: {x.shape[0]} vs {y.shape[0]}")
    d = x - y
    return float(np.sqrt(np.dot(d, d)))


def distances_to(query: np.ndarray, block: np.ndarray) -> np.ndarray:
    """Euclidean distance from one query to every row of ``block``."""
    d = np.asarray(block, dtype=np.float64) - query
    return np.sqrt(np.einsum("ij,ij->i", d, d))


def random_walk_block(count: int, n: int, rng: np.random.Generator) -> np.ndarray:
    steps = rng.standard_normal((count, n))
    return z_normalize_rows(np.cumsum(steps, axis=1))


def random_walk_generate(count: int, n: int = DEFAULT_LENGTH, seed: int = 0,
                         chunk: int = 4096) -> Iterator[DataSeries]:
    """Yield ``count`` z-normalized random walks, timestamped 1..count.

    The stream is a pure function of ``(count, n, seed)``; chunking only
    bounds memory and does not change the values.
    """
    if count < 1 or n < 2:
        raise ValueError("count must be >= 1 and n >= 2")
    rng = np.random.default_rng(seed)
    ts = 1
    remaining = count
    while remaining:
        k = min(chunk, remaining)
        for row in random_walk_block(k, n, rng):
            yield DataSeries(row, timestamp=ts)
            ts += 1
        remaining -= k
