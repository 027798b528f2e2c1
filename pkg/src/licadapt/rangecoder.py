"""32-bit carry-less range coder with 16-bit frequency tables.

Symbols are integers in [-L, L]; anything outside goes through an escape
bucket followed by 32 raw bits coded as two uniform 16-bit chunks.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass
from typing import List

import numpy as np
from scipy.special import ndtr

from .errors import CodecError, FramingError

PRECISION = 16
TOTAL = 1 << PRECISION
TOP = 1 << 24
BOT = 1 << 16
MASK = (1 << 32) - 1
DEFAULT_BOUND = 255


@dataclass
class RangeCoderTable:
    """Per-channel cumulative frequencies over [-L, L] plus an escape bucket.

    ``cdf`` has shape (M, 2L + 3); row c is 0, ..., TOTAL and strictly
    increasing. Symbol s maps to column s + L; the escape bucket is 2L + 1.
    """

    cdf: np.ndarray
    L: int

    def __post_init__(self):
        cdf = np.asarray(self.cdf, dtype=np.int64)
        if cdf.ndim != 2 or cdf.shape[1] != 2 * self.L + 3:
            raise CodecError(f"cdf table shape {cdf.shape} inconsistent with L={self.L}")
        if (cdf[:, 0] != 0).any() or (cdf[:, -1] != TOTAL).any() or (np.diff(cdf, axis=1) <= 0).any():
            raise CodecError("corrupted cdf table: must rise strictly from 0 to 2^16")
        self.cdf = cdf
        self._rows: List[List[int]] = [row.tolist() for row in cdf]

    @property
    def channels(self) -> int:
        return self.cdf.shape[0]

    @property
    def escape(self) -> int:
        return 2 * self.L + 1

    def min_bits_per_symbol(self) -> float:
        """Cheapest possible code length of one symbol over all channels."""
        return -math.log2(int(np.diff(self.cdf, axis=1).max()) / TOTAL)


def quantize_pmf(pmf: np.ndarray) -> np.ndarray:
    """Integer frequencies summing to 2^16, each >= 1, by largest remainder."""
    pmf = np.clip(np.asarray(pmf, dtype=np.float64), 0.0, None)
    n = pmf.shape[-1]
    pmf = pmf / pmf.sum(axis=-1, keepdims=True)
    avail = TOTAL - n
    scaled = pmf * avail
    freq = np.floor(scaled).astype(np.int64)
    short = avail - freq.sum(axis=-1)
    frac = scaled - freq
    for row in range(freq.shape[0]):
        order = np.argsort(-frac[row], kind="stable")
        freq[row, order[: short[row]]] += 1
    return freq + 1


def build_tables(mean: np.ndarray, scale: np.ndarray, L: int = DEFAULT_BOUND) -> RangeCoderTable:
    """Discretize per-channel Gaussians into range-coder tables."""
    mean = np.asarray(mean, dtype=np.float64).reshape(-1, 1)
    scale = np.asarray(scale, dtype=np.float64).reshape(-1, 1)
    if (scale <= 0).any() or not np.isfinite(scale).all() or not np.isfinite(mean).all():
        raise CodecError("entropy model parameters must be finite with positive scale")
    k = np.arange(-L, L + 1, dtype=np.float64)[None, :]
    upper = ndtr((k + 0.5 - mean) / scale)
    lower = ndtr((k - 0.5 - mean) / scale)
    pmf = upper - lower
    escape = np.clip(1.0 - pmf.sum(axis=1, keepdims=True), 0.0, None)
    freq = quantize_pmf(np.concatenate([pmf, escape], axis=1))
    cdf = np.zeros((freq.shape[0], freq.shape[1] + 1), dtype=np.int64)
    np.cumsum(freq, axis=1, out=cdf[:, 1:])
    return RangeCoderTable(cdf, L)


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK
        self.out = bytearray()

    def encode(self, cum: int, freq: int) -> None:
        r = self.range >> PRECISION
        low = self.low + cum * r
        rng = r * freq
        out = self.out
        while True:
            if (low ^ (low + rng)) < TOP:
                pass
            elif rng < BOT:
                rng = -low & (BOT - 1)
            else:
                break
            out.append(low >> 24)
            low = (low << 8) & MASK
            rng = (rng << 8) & MASK
        self.low, self.range = low, rng

    def finish(self) -> bytes:
        low = self.low
        for _ in range(4):
            self.out.append(low >> 24)
            low = (low << 8) & MASK
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.low = 0
        self.range = MASK
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        if self.pos >= len(self.data):
            raise FramingError("range decoder ran past the end of the payload")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def target(self) -> int:
        r = self.range >> PRECISION
        if r == 0:
            raise FramingError("range decoder state collapsed")
        value = (self.code - self.low) // r
        if not 0 <= value < TOTAL:
            raise FramingError("payload inconsistent with the frequency table")
        return value

    def update(self, cum: int, freq: int) -> None:
        r = self.range >> PRECISION
        low = self.low + cum * r
        rng = r * freq
        code = self.code
        while True:
            if (low ^ (low + rng)) < TOP:
                pass
            elif rng < BOT:
                rng = -low & (BOT - 1)
            else:
                break
            code = ((code << 8) | self._byte()) & MASK
            low = (low << 8) & MASK
            rng = (rng << 8) & MASK
        self.low, self.range, self.code = low, rng, code

    @property
    def consumed(self) -> int:
        return self.pos


def encode_symbols(symbols: np.ndarray, table: RangeCoderTable) -> bytes:
    """Code an integer array of shape (M, h, w), channel-major."""
    symbols = np.asarray(symbols)
    if symbols.ndim != 3 or symbols.shape[0] != table.channels:
        raise CodecError(f"symbols {symbols.shape} do not match a {table.channels}-channel table")
    enc = RangeEncoder()
    L, esc = table.L, table.escape
    for c in range(symbols.shape[0]):
        row = table._rows[c]
        for s in symbols[c].ravel().tolist():
            idx = s + L
            if 0 <= idx < esc:
                enc.encode(row[idx], row[idx + 1] - row[idx])
            else:
                enc.encode(row[esc], row[esc + 1] - row[esc])
                raw = s & MASK
                enc.encode(raw >> 16, 1)
                enc.encode(raw & 0xFFFF, 1)
    return enc.finish()


def decode_symbols(data: bytes, table: RangeCoderTable, shape) -> np.ndarray:
    M, h, w = shape
    if M != table.channels:
        raise CodecError(f"latent has {M} channels, table has {table.channels}")
    dec = RangeDecoder(data)
    L, esc = table.L, table.escape
    n = h * w
    out = np.empty((M, n), dtype=np.int64)
    for c in range(M):
        row = table._rows[c]
        vals = []
        for _ in range(n):
            t = dec.target()
            idx = bisect_right(row, t) - 1
            dec.update(row[idx], row[idx + 1] - row[idx])
            if idx != esc:
                vals.append(idx - L)
                continue
            hi = dec.target()
            dec.update(hi, 1)
            lo = dec.target()
            dec.update(lo, 1)
            raw = (hi << 16) | lo
            s = raw - (1 << 32) if raw >= 1 << 31 else raw
            if -L <= s <= L:
                raise FramingError(f"escape-coded symbol {s} lies inside the table range")
            vals.append(s)
        out[c] = vals
    if dec.consumed != len(data):
        raise FramingError(f"latent payload has {len(data) - dec.consumed} trailing byte(s)")
    return out.reshape(M, h, w)
