"""Bit-exact entropy coding: CDF quantization, range coder, weight prior.

The range coder keeps a 64-bit ``low`` (plus a carry bit) and a 64-bit
``range``, renormalizing one byte at a time whenever ``range`` drops below
2**56.  With 16-bit frequencies the per-symbol truncation loss is at most
2**-40 relative, so the stream length tracks the ideal code length closely.

The decoder cannot detect a CDF that differs from the encoder's: both sides
must feed bitwise-identical CDFs in the same order.
"""

from __future__ import annotations

import logging
import math
from bisect import bisect_right
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DecodeError, NumericFault, TruncatedError

log = logging.getLogger(__name__)

PRECISION = 16
TOTAL = 1 << PRECISION

_MASK64 = (1 << 64) - 1
_TOP = 1 << 56
_LOW_KEEP = (1 << 56) - 1


# ---------------------------------------------------------------------------
# CDF quantization
# ---------------------------------------------------------------------------

def quantize_cdf(pmf: np.ndarray) -> np.ndarray:
    """Integer CDF(s) with total 2**16 and every symbol at least 1.

    Accepts a single pmf ``(n,)`` or a stack ``(rows, n)``; returns uint32
    cumulative tables with one extra leading zero column.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    single = pmf.ndim == 1
    p = np.atleast_2d(pmf)
    rows, n = p.shape
    if n > TOTAL:
        raise ConfigError(f"alphabet of {n} symbols does not fit {PRECISION}-bit precision")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise NumericFault("pmf must be finite and non-negative")
    sums = p.sum(axis=1)
    if np.any((sums < 0.99) | (sums > 1.01)):
        raise NumericFault(f"pmf must sum to ~1, got {sums.min():.6f}..{sums.max():.6f}")

    scaled = p / sums[:, None] * TOTAL
    counts = np.floor(scaled).astype(np.int64)
    rem = scaled - counts
    # largest remainder first, lower symbol index on ties
    extra = np.clip(TOTAL - counts.sum(axis=1), 0, n)
    key = (np.floor(rem * 2.0**40).astype(np.int64) << 20) | ((1 << 20) - 1 - np.arange(n))
    ranked = np.sort(key, axis=1)
    cut = ranked[np.arange(rows), np.maximum(n - extra, 0) % n]
    counts += (key >= cut[:, None]) & (extra[:, None] > 0)

    counts = np.maximum(counts, 1)
    surplus = counts.sum(axis=1) - TOTAL  # deficit if negative
    big = np.argmax(counts, axis=1)
    counts[np.arange(rows), big] -= surplus

    cdf = np.zeros((rows, n + 1), dtype=np.uint32)
    cdf[:, 1:] = np.cumsum(counts, axis=1)
    return cdf[0] if single else cdf


def cdf_bits(cdf: Sequence[int], symbol: int) -> float:
    """Ideal code length of ``symbol`` under a quantized CDF."""
    return PRECISION - math.log2(int(cdf[symbol + 1]) - int(cdf[symbol]))


# ---------------------------------------------------------------------------
# range coder
# ---------------------------------------------------------------------------

class RangeEncoder:
    """Byte-oriented range encoder with carry propagation."""

    def __init__(self):
        self.low = 0
        self.range = _MASK64
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()

    def _shift_low(self):
        low = self.low
        if low < 0xFF << 56 or low > _MASK64:
            carry = low >> 64
            temp = self._cache
            while True:
                self._out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self._cache_size -= 1
                if not self._cache_size:
                    break
            self._cache = (low >> 56) & 0xFF
        self._cache_size += 1
        self.low = (low & _LOW_KEEP) << 8

    def encode(self, symbol: int, cdf: Sequence[int]):
        start = int(cdf[symbol])
        freq = int(cdf[symbol + 1]) - start
        if freq <= 0:
            raise ConfigError(f"symbol {symbol} has zero frequency")
        r = self.range >> PRECISION
        self.low += r * start
        self.range = r * freq
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(9):
            self._shift_low()
        return bytes(self._out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self.range = _MASK64
        self.code = 0
        for _ in range(9):
            self.code = (self.code << 8) | self._next()
        self.code &= _MASK64

    def _next(self) -> int:
        if self._pos >= len(self._data):
            raise TruncatedError("range-coded stream ended early")
        b = self._data[self._pos]
        self._pos += 1
        return b

    def decode(self, cdf: Sequence[int]) -> int:
        r = self.range >> PRECISION
        target = min(self.code // r, TOTAL - 1)
        symbol = bisect_right(cdf, target) - 1
        start = int(cdf[symbol])
        self.code -= r * start
        self.range = r * (int(cdf[symbol + 1]) - start)
        if self.code >= self.range:
            raise DecodeError("corrupt range-coded stream")
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._next()) & _MASK64
            self.range <<= 8
        return symbol

    @property
    def consumed(self) -> int:
        return self._pos


CdfProvider = Callable[[int, list], Sequence[int]]


def _as_provider(cdfs) -> CdfProvider:
    if callable(cdfs):
        return cdfs
    seq = cdfs
    return lambda i, _prev: seq[i]


def encode_symbols(symbols: Iterable[int], cdfs) -> bytes:
    """Range-code ``symbols``; ``cdfs`` is a sequence or ``f(index, previous)``."""
    provider = _as_provider(cdfs)
    enc = RangeEncoder()
    done: list[int] = []
    for i, s in enumerate(symbols):
        enc.encode(int(s), provider(i, done))
        done.append(int(s))
    return enc.finish()


def decode_symbols(data: bytes, count: int, cdfs) -> list[int]:
    provider = _as_provider(cdfs)
    dec = RangeDecoder(data)
    out: list[int] = []
    for i in range(count):
        out.append(dec.decode(provider(i, out)))
    return out


# ---------------------------------------------------------------------------
# static logistic prior for quantized incremental weights
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WeightPrior:
    scale: float = 0.05
    step: float = 0.05
    k_max: int = 255

    def __post_init__(self):
        if self.scale <= 0 or self.step <= 0 or self.k_max < 1:
            raise ConfigError("weight prior needs scale > 0, step > 0, k_max >= 1")

    @property
    def n_bins(self) -> int:
        return 2 * self.k_max + 1


def _logistic_cdf(x):
    return expit(x)


def weight_pmf(k, prior: WeightPrior = WeightPrior()):
    """Probability of integer bin(s) ``k`` under the discretized zero-mean logistic.

    The two outermost bins absorb the tails so the support sums to one.
    """
    k = np.asarray(k)
    if np.any(np.abs(k) > prior.k_max):
        raise ConfigError(f"bin outside [-{prior.k_max}, {prior.k_max}]")
    w, s = prior.step, prior.scale
    # evaluate on the lower side, where both CDF values are small and exact
    a = -np.abs(k)
    upper = _logistic_cdf((a * w + w / 2) / s)
    lower = np.where(a == -prior.k_max, 0.0, _logistic_cdf((a * w - w / 2) / s))
    out = upper - lower
    return float(out) if out.ndim == 0 else out


def weight_cdf(prior: WeightPrior) -> np.ndarray:
    k = np.arange(-prior.k_max, prior.k_max + 1)
    return quantize_cdf(weight_pmf(k, prior))


def clamp_bins(bins, prior: WeightPrior) -> np.ndarray:
    bins = np.asarray(bins, dtype=np.int64)
    over = np.abs(bins) > prior.k_max
    if np.any(over):
        log.warning("%d weight bins exceed +/-%d and were clamped", int(over.sum()), prior.k_max)
        bins = np.clip(bins, -prior.k_max, prior.k_max)
    return bins


def encode_weights(bins, prior: WeightPrior = WeightPrior()) -> bytes:
    """Range-code integer weight bins; an empty set yields an empty section."""
    bins = clamp_bins(np.asarray(bins).ravel(), prior)
    if bins.size == 0:
        return b""
    cdf = weight_cdf(prior).tolist()
    enc = RangeEncoder()
    for b in (bins + prior.k_max).tolist():
        enc.encode(b, cdf)
    return enc.finish()


def decode_weights(data: bytes, count: int, prior: WeightPrior = WeightPrior()) -> np.ndarray:
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    cdf = weight_cdf(prior).tolist()
    dec = RangeDecoder(data)
    out = [dec.decode(cdf) for _ in range(count)]
    return np.asarray(out, dtype=np.int64) - prior.k_max


def weight_bits(bins, prior: WeightPrior = WeightPrior()) -> float:
    """Ideal code length of the bins under the exact (unquantized) pmf."""
    bins = clamp_bins(np.asarray(bins).ravel(), prior)
    if bins.size == 0:
        return 0.0
    return float(-np.log2(weight_pmf(bins, prior)).sum())
