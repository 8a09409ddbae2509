"""Range coder and the per-channel Laplace entropy model.

The coder is a 32-bit carry-propagating range coder (the byte-oriented
scheme used by LZMA): a 33-bit ``low``, a 32-bit ``range`` renormalised a
byte at a time whenever it drops below 2^24. Frequency tables always sum to
2^16.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from functools import lru_cache

import numpy as np

from ..errors import CorruptStream, Overflow
from ..nn import laplace_bin_probability

PRECISION = 16
TOTAL = 1 << PRECISION
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF
LATENT_LIMIT = 1 << 15
MAX_HALF_WIDTH = 16000
ESCAPE_BITS = 16


class FrequencyTable:
    """Integer frequencies summing to ``TOTAL`` plus their cumulative sums."""

    __slots__ = ("freqs", "cum")

    def __init__(self, freqs):
        freqs = [int(f) for f in freqs]
        if any(f <= 0 for f in freqs):
            raise ValueError("every symbol needs a positive frequency")
        if sum(freqs) != TOTAL:
            raise ValueError(f"frequencies sum to {sum(freqs)}, expected {TOTAL}")
        self.freqs = freqs
        cum = [0]
        for f in freqs:
            cum.append(cum[-1] + f)
        self.cum = cum

    def __len__(self):
        return len(self.freqs)

    @classmethod
    def from_probabilities(cls, probs):
        """Quantize a pmf: one guaranteed count per symbol, remainder to the mode."""
        p = np.asarray(probs, dtype=np.float64)
        n = len(p)
        if n > TOTAL // 2:
            raise ValueError(f"alphabet of {n} symbols too large for {PRECISION}-bit tables")
        p = p / p.sum()
        f = np.floor(p * (TOTAL - n)).astype(np.int64) + 1
        f[int(np.argmax(p))] += TOTAL - int(f.sum())
        return cls(f)

    @classmethod
    def uniform(cls, n):
        if TOTAL % n:
            return cls.from_probabilities(np.full(n, 1.0 / n))
        return cls([TOTAL // n] * n)

    def probability(self, symbol):
        return self.freqs[symbol] / TOTAL


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        low = self.low
        if (low & _MASK32) < 0xFF000000 or (low >> 32):
            carry = low >> 32
            temp = self.cache
            out = self.out
            while True:
                out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if not self.cache_size:
                    break
            self.cache = (low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (low & 0x00FFFFFF) << 8

    def encode(self, start, size):
        r = self.range >> PRECISION
        self.low += r * start
        self.range = r * size
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def encode_many(self, tables, symbols):
        """Encode ``symbols[k]`` with ``tables[k]``; the hot loop is inlined."""
        low, rng, cache, cache_size = self.low, self.range, self.cache, self.cache_size
        out = self.out
        for table, s in zip(tables, symbols):
            cum = table.cum
            start = cum[s]
            r = rng >> PRECISION
            low += r * start
            rng = r * (cum[s + 1] - start)
            while rng < _TOP:
                rng <<= 8
                if (low & _MASK32) < 0xFF000000 or (low >> 32):
                    carry = low >> 32
                    temp = cache
                    while True:
                        out.append((temp + carry) & 0xFF)
                        temp = 0xFF
                        cache_size -= 1
                        if not cache_size:
                            break
                    cache = (low >> 24) & 0xFF
                cache_size += 1
                low = (low & 0x00FFFFFF) << 8
        self.low, self.range, self.cache, self.cache_size = low, rng, cache, cache_size

    def finish(self):
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data):
        self.data = bytes(data)
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(5):
            self.code = (self.code << 8) | self._next()
        self.code &= _MASK32

    def _next(self):
        p = self.pos
        self.pos = p + 1
        if p < len(self.data):
            return self.data[p]
        if p >= len(self.data) + 4:
            raise CorruptStream("range decoder ran past the end of the body")
        return 0

    def decode(self, table):
        r = self.range >> PRECISION
        v = self.code // r
        if v >= TOTAL:
            raise CorruptStream("code value outside the frequency table")
        cum = table.cum
        s = bisect_right(cum, v) - 1
        start = cum[s]
        self.code -= r * start
        self.range = r * (cum[s + 1] - start)
        while self.range < _TOP:
            self.range <<= 8
            self.code = ((self.code << 8) | self._next()) & _MASK32
        return s

    def decode_many(self, tables):
        data, n = self.data, len(self.data)
        pos, rng, code = self.pos, self.range, self.code
        out = []
        append = out.append
        for table in tables:
            r = rng >> PRECISION
            v = code // r
            if v >= TOTAL:
                raise CorruptStream("code value outside the frequency table")
            cum = table.cum
            s = bisect_right(cum, v) - 1
            start = cum[s]
            code -= r * start
            rng = r * (cum[s + 1] - start)
            while rng < _TOP:
                rng <<= 8
                if pos < n:
                    byte = data[pos]
                elif pos < n + 4:
                    byte = 0
                else:
                    raise CorruptStream("range decoder ran past the end of the body")
                pos += 1
                code = ((code << 8) | byte) & _MASK32
            append(s)
        self.pos, self.range, self.code = pos, rng, code
        return out

    def check_consumed(self):
        """The encoder never writes bytes the decoder does not read."""
        if self.pos < len(self.data):
            raise CorruptStream(f"{len(self.data) - self.pos} unread trailing bytes in body")


def _tables_for(model, count):
    if isinstance(model, FrequencyTable):
        return [model] * count
    return [model.table(k) for k in range(count)]


def range_encode(symbols, model):
    """Encode table indices. ``model`` is a FrequencyTable or has ``table(position)``."""
    symbols = [int(s) for s in symbols]
    tables = _tables_for(model, len(symbols))
    for t, s in zip(tables, symbols):
        if not 0 <= s < len(t):
            raise ValueError(f"symbol {s} outside alphabet of {len(t)}")
    enc = RangeEncoder()
    enc.encode_many(tables, symbols)
    return enc.finish()


def range_decode(data, count, model):
    dec = RangeDecoder(data)
    out = dec.decode_many(_tables_for(model, count))
    dec.check_consumed()
    return out


def ideal_bits(symbols, model):
    """Sum of -log2 of the table probabilities."""
    tables = _tables_for(model, len(symbols))
    return float(sum(-math.log2(t.probability(int(s))) for t, s in zip(tables, symbols)))


# ------------------------------------------------------------ Laplace model


class LaplaceTable:
    """Table over integers ``[-M, M]`` plus an escape symbol for larger magnitudes."""

    def __init__(self, scale):
        self.scale = float(np.float32(scale))
        b = max(self.scale, 1e-6)
        self.half_width = int(min(max(math.ceil(b * 17 * math.log(2.0)), 1), MAX_HALF_WIDTH))
        m = self.half_width
        probs = laplace_bin_probability(np.arange(-m, m + 1), b)
        tail = max(1.0 - float(probs.sum()), 0.0)
        self.table = FrequencyTable.from_probabilities(np.append(probs, max(tail, 1e-12)))
        self.escape = 2 * m + 1


@lru_cache(maxsize=256)
def laplace_table(scale):
    return LaplaceTable(scale)


_BYTE_TABLE = FrequencyTable.uniform(256)


class LaplaceModel:
    """Zero-mean Laplace per channel with unit bins; scales are float32."""

    def __init__(self, scales):
        self.scales = np.asarray(scales, dtype=np.float32).reshape(-1)
        self.tables = [laplace_table(float(s)) for s in self.scales]

    @property
    def channels(self):
        return len(self.scales)

    def expand(self, values):
        """Translate (N, C) integers into (tables, symbols) including escape bytes."""
        values = np.asarray(values)
        if values.size and (values.min() < -LATENT_LIMIT or values.max() >= LATENT_LIMIT):
            raise Overflow(f"latent value outside [-{LATENT_LIMIT}, {LATENT_LIMIT})")
        tables, symbols = [], []
        lt = self.tables
        c = self.channels
        for k, v in enumerate(values.reshape(-1).tolist()):
            t = lt[k % c]
            m = t.half_width
            if -m <= v <= m:
                tables.append(t.table)
                symbols.append(v + m)
            else:
                raw = v + LATENT_LIMIT
                tables.extend((t.table, _BYTE_TABLE, _BYTE_TABLE))
                symbols.extend((t.escape, raw >> 8, raw & 0xFF))
        return tables, symbols

    def estimate_bits(self, values):
        """Continuous-bin rate: sum of -log2 P(v) under each channel's Laplace."""
        values = np.asarray(values, dtype=np.float64).reshape(-1, self.channels)
        p = laplace_bin_probability(values, np.maximum(self.scales.astype(np.float64), 1e-6))
        return float(-np.log2(np.maximum(p, 1e-12)).sum())


SENTINEL = (0xA5, 0x5A)


def encode_latents(values, model):
    """Range-code (N, C) integer latents, followed by a two-byte sentinel."""
    tables, symbols = model.expand(values)
    tables += [_BYTE_TABLE, _BYTE_TABLE]
    symbols += list(SENTINEL)
    enc = RangeEncoder()
    enc.encode_many(tables, symbols)
    return enc.finish()


def decode_latents(data, count, model):
    """Inverse of :func:`encode_latents`; raises CorruptStream on any inconsistency."""
    dec = RangeDecoder(data)
    c = model.channels
    out = np.empty(count * c, dtype=np.int64)
    lt = model.tables
    for k in range(count * c):
        t = lt[k % c]
        s = dec.decode(t.table)
        if s == t.escape:
            raw = (dec.decode(_BYTE_TABLE) << 8) | dec.decode(_BYTE_TABLE)
            v = raw - LATENT_LIMIT
            if -t.half_width <= v <= t.half_width:
                raise CorruptStream("escape code for an in-table value")
            out[k] = v
        else:
            out[k] = s - t.half_width
    if (dec.decode(_BYTE_TABLE), dec.decode(_BYTE_TABLE)) != SENTINEL:
        raise CorruptStream("end-of-body sentinel mismatch")
    dec.check_consumed()
    return out.reshape(count, c)
