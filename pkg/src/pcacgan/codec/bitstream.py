"""Byte layout of a compressed cloud.

All integers are little-endian::

    magic "PCAB" | version u16 | lambda index u8 | flags u8 | digest u64
    bit_depth u8 | block_edge u8 | block count u32
    per block: origin 3 x u16, class u8
    latent count u32 | latent channels u8 | per-channel scale f32
    body length u32 | body bytes
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .. import sparse
from ..errors import CorruptStream, VersionMismatch

MAGIC = b"PCAB"
VERSION = 1
FLAG_NO_AVRPM = 0x01

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def geometry_digest(positions):
    """64-bit FNV-1a over sorted positions, each coordinate fed as a u32 LE."""
    pos = sparse.canonical_coords(np.asarray(positions, dtype=np.int64).reshape(-1, 3))
    # duplicates are removed by canonical_coords; geometry is a set
    h = _FNV_OFFSET
    for byte in pos.astype("<u4").tobytes():
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class Bitstream:
    lambda_index: int
    flags: int
    digest: int
    bit_depth: int
    block_edge: int
    origins: np.ndarray
    classes: np.ndarray
    latent_count: int
    scales: np.ndarray
    body: bytes
    version: int = VERSION

    @property
    def latent_channels(self):
        return len(self.scales)

    def to_bytes(self):
        origins = np.asarray(self.origins, dtype=np.int64).reshape(-1, 3)
        if len(origins) and (origins.min() < 0 or origins.max() > 0xFFFF):
            raise ValueError("block origins must fit in u16")
        out = bytearray()
        out += MAGIC
        out += struct.pack("<HBBQBBI", self.version, self.lambda_index, self.flags, self.digest,
                           self.bit_depth, self.block_edge, len(origins))
        table = np.zeros(len(origins), dtype=[("o", "<u2", 3), ("c", "u1")])
        table["o"] = origins
        table["c"] = np.asarray(self.classes, dtype=np.uint8)
        out += table.tobytes()
        out += struct.pack("<IB", self.latent_count, self.latent_channels)
        out += np.asarray(self.scales, dtype="<f4").tobytes()
        out += struct.pack("<I", len(self.body))
        out += self.body
        return bytes(out)

    @property
    def size_bits(self):
        return 8 * len(self.to_bytes())

    @classmethod
    def from_bytes(cls, data):
        data = bytes(data)
        view = _Reader(data)
        if view.take(4) != MAGIC:
            raise CorruptStream("bad magic")
        (version,) = view.unpack("<H")
        if version != VERSION:
            raise VersionMismatch(f"bitstream version {version}, expected {VERSION}")
        lam, flags, digest, bit_depth, block_edge, n_blocks = view.unpack("<BBQBBI")
        raw = view.take(7 * n_blocks)
        table = np.frombuffer(raw, dtype=[("o", "<u2", 3), ("c", "u1")])
        origins = table["o"].astype(np.int64).reshape(-1, 3)
        classes = table["c"].astype(np.int64)
        if np.any(classes > 1):
            raise CorruptStream("block class outside {0, 1}")
        latent_count, channels = view.unpack("<IB")
        scales = np.frombuffer(view.take(4 * channels), dtype="<f4").astype(np.float32)
        if not np.all(np.isfinite(scales)) or np.any(scales < 1e-6):
            raise CorruptStream("invalid entropy-model scale")
        (body_len,) = view.unpack("<I")
        body = view.take(body_len)
        if view.pos != len(data):
            raise CorruptStream(f"{len(data) - view.pos} trailing bytes after body")
        return cls(lam, flags, digest, bit_depth, block_edge, origins, classes,
                   latent_count, scales, body, version)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CorruptStream("bitstream truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))
