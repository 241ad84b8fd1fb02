"""PAA/SAX summaries and their sortable, bit-interleaved form.

A SAX word of ``w`` symbols with ``c`` bits each is turned into a single
``w*c``-bit key by emitting the most significant bit of every segment first,
then every second bit, and so on. Sorting those keys lays series out along a
z-order curve over the segment space, and any key prefix of length ``k*w``
pins down the top ``k`` bits of every segment.

Keys travel through files and arrays as fixed-width big-endian byte strings so
that bytewise comparison equals numeric comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np

from .errors import ConfigError, ShapeMismatch, WidthMismatch
from .series import DataSeries


@dataclass(frozen=True)
class SummaryConfig:
    w: int = 16
    c: int = 8
    n: int = 256

    def __post_init__(self):
        if self.w < 1:
            raise ConfigError(f"need at least one segment, got w={self.w}")
        if not 1 <= self.c <= 16:
            raise ConfigError(f"bits per segment must lie in [1, 16], got c={self.c}")
        if self.n < 1 or self.n % self.w:
            raise ConfigError(f"series length {self.n} is not divisible by w={self.w}")

    @property
    def key_bits(self) -> int:
        return self.w * self.c

    @property
    def key_bytes(self) -> int:
        return (self.key_bits + 7) // 8

    @property
    def segment_length(self) -> int:
        return self.n // self.w

    @cached_property
    def table(self) -> "BreakpointTable":
        return gaussian_breakpoints(self.c)


# --- inverse normal CDF -----------------------------------------------------

# Acklam's rational approximation; one Halley step against erfc brings it to
# double precision.
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def inverse_normal_cdf(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    if p == 0.5:
        return 0.0
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
             / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    elif p <= 1.0 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
             / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0))
    else:
        q = math.sqrt(-2.0 * math.log1p(-p))
        x = -((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
              / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(x * x / 2.0)
    return x - u / (1.0 + x * u / 2.0)


@dataclass(frozen=True)
class BreakpointTable:
    cuts: np.ndarray
    bits: int

    @cached_property
    def lower_edges(self) -> np.ndarray:
        """Lower edge of each symbol's region (-inf for symbol 0)."""
        return np.concatenate(([-np.inf], self.cuts))

    @cached_property
    def upper_edges(self) -> np.ndarray:
        return np.concatenate((self.cuts, [np.inf]))


@lru_cache(maxsize=None)
def gaussian_breakpoints(c: int) -> BreakpointTable:
    """Standard-normal quantiles splitting the line into ``2**c`` equiprobable regions."""
    if not 1 <= c <= 16:
        raise ConfigError(f"bits per segment must lie in [1, 16], got {c}")
    a = 1 << c
    half = [inverse_normal_cdf((i + 1) / a) for i in range(a // 2 - 1)]
    # Exact symmetry: mirror the lower half instead of evaluating it twice.
    cuts = np.array(half + [0.0] + [-x for x in reversed(half)], dtype=np.float64)
    cuts.setflags(write=False)
    return BreakpointTable(cuts=cuts, bits=c)


# --- words and keys ---------------------------------------------------------

@dataclass(frozen=True)
class PaaWord:
    means: np.ndarray


@dataclass(frozen=True)
class SaxWord:
    symbols: tuple[int, ...]
    bits: int

    def __post_init__(self):
        limit = 1 << self.bits
        for s in self.symbols:
            if not 0 <= s < limit:
                raise ValueError(f"symbol {s} does not fit in {self.bits} bits")


@dataclass(frozen=True, order=True)
class InvSaxKey:
    value: int
    width: int

    def to_bytes(self) -> bytes:
        return self.value.to_bytes((self.width + 7) // 8, "big")

    @classmethod
    def from_bytes(cls, data: bytes, width: int) -> "InvSaxKey":
        return cls(int.from_bytes(data, "big"), width)


def paa(series, cfg: SummaryConfig) -> PaaWord:
    values = series.values if isinstance(series, DataSeries) else np.asarray(series, dtype=np.float64)
    if values.shape != (cfg.n,):
        raise ShapeMismatch(f"expected a series of length {cfg.n}, got {values.shape}")
    return PaaWord(values.reshape(cfg.w, cfg.segment_length).mean(axis=1))


def paa_rows(block: np.ndarray, cfg: SummaryConfig) -> np.ndarray:
    block = np.asarray(block, dtype=np.float64)
    if block.ndim != 2 or block.shape[1] != cfg.n:
        raise ShapeMismatch(f"expected rows of length {cfg.n}, got {block.shape}")
    return block.reshape(block.shape[0], cfg.w, cfg.segment_length).mean(axis=2)


def sax(word: PaaWord, table: BreakpointTable) -> SaxWord:
    symbols = np.searchsorted(table.cuts, word.means, side="right")
    return SaxWord(tuple(int(s) for s in symbols), table.bits)


def sax_rows(means: np.ndarray, table: BreakpointTable) -> np.ndarray:
    return np.searchsorted(table.cuts, means, side="right").astype(np.uint16)


def invert_sum(word: SaxWord) -> InvSaxKey:
    w, c = len(word.symbols), word.bits
    value = 0
    for i in range(c):
        shift = c - 1 - i
        for s in word.symbols:
            value = (value << 1) | ((s >> shift) & 1)
    return InvSaxKey(value, w * c)


def restore_sum(key: InvSaxKey, cfg: SummaryConfig) -> SaxWord:
    if key.width != cfg.key_bits:
        raise WidthMismatch(f"key is {key.width} bits wide, configuration needs {cfg.key_bits}")
    w, c = cfg.w, cfg.c
    symbols = [0] * w
    pos = key.width - 1
    for _ in range(c):
        for j in range(w):
            symbols[j] = (symbols[j] << 1) | ((key.value >> pos) & 1)
            pos -= 1
    return SaxWord(tuple(symbols), c)


def interleave_rows(symbols: np.ndarray, cfg: SummaryConfig) -> np.ndarray:
    """Vectorized ``invert_sum``: (N, w) symbols -> (N, key_bytes) big-endian keys."""
    symbols = np.asarray(symbols, dtype=np.uint32)
    count = symbols.shape[0]
    shifts = np.arange(cfg.c - 1, -1, -1, dtype=np.uint32)
    # bits[r, i, j] = bit i (MSB first) of symbol j
    bits = ((symbols[:, None, :] >> shifts[None, :, None]) & 1).astype(np.uint8)
    flat = bits.reshape(count, cfg.key_bits)
    pad = cfg.key_bytes * 8 - cfg.key_bits
    if pad:
        flat = np.concatenate((np.zeros((count, pad), dtype=np.uint8), flat), axis=1)
    return np.packbits(flat, axis=1)


def deinterleave_rows(keys: np.ndarray, cfg: SummaryConfig) -> np.ndarray:
    """Vectorized ``restore_sum``: (N, key_bytes) keys -> (N, w) uint16 symbols."""
    keys = np.asarray(keys, dtype=np.uint8)
    if keys.ndim != 2 or keys.shape[1] != cfg.key_bytes:
        raise WidthMismatch(f"expected keys of {cfg.key_bytes} bytes, got shape {keys.shape}")
    pad = cfg.key_bytes * 8 - cfg.key_bits
    bits = np.unpackbits(keys, axis=1)[:, pad:].reshape(-1, cfg.c, cfg.w).astype(np.uint16)
    weights = (1 << np.arange(cfg.c - 1, -1, -1)).astype(np.uint16)
    return np.einsum("nij,i->nj", bits, weights).astype(np.uint16)


def keys_for_rows(block: np.ndarray, cfg: SummaryConfig) -> np.ndarray:
    return interleave_rows(sax_rows(paa_rows(block, cfg), cfg.table), cfg)


def key_for(series, cfg: SummaryConfig) -> bytes:
    return invert_sum(sax(paa(series, cfg), cfg.table)).to_bytes()


# --- lower bound ------------------------------------------------------------

def _gaps(query_means: np.ndarray, symbols: np.ndarray, table: BreakpointTable) -> np.ndarray:
    lo = table.lower_edges[symbols]
    hi = table.upper_edges[symbols]
    return np.maximum(lo - query_means, 0.0) + np.maximum(query_means - hi, 0.0)


def mindist(query_paa: PaaWord, word: SaxWord, table: BreakpointTable, n: int) -> float:
    """Lower bound on the Euclidean distance from the query to any series with ``word``.

    Each segment contributes the gap between the query's segment mean and the
    nearest edge of the symbol's region (zero when the mean falls inside it).
    """
    means = np.asarray(query_paa.means, dtype=np.float64)
    if means.shape[0] != len(word.symbols):
        raise ShapeMismatch(f"query has {means.shape[0]} segments, word has {len(word.symbols)}")
    if word.bits != table.bits:
        raise ShapeMismatch(f"word uses {word.bits} bits, table {table.bits}")
    gaps = _gaps(means, np.asarray(word.symbols, dtype=np.intp), table)
    return float(math.sqrt(n / means.shape[0]) * math.sqrt(float(np.dot(gaps, gaps))))


def mindist_rows(query_means: np.ndarray, symbols: np.ndarray, table: BreakpointTable,
                 n: int) -> np.ndarray:
    symbols = np.asarray(symbols)
    w = symbols.shape[1]
    gaps = _gaps(np.asarray(query_means, dtype=np.float64)[None, :], symbols.astype(np.intp), table)
    return math.sqrt(n / w) * np.sqrt(np.einsum("ij,ij->i", gaps, gaps))
