"""Shared binary-format helpers: FNV-1a checksums and a guarded byte reader.

Both on-disk formats (model checkpoints and binary datasets) end with an
8-byte little-endian FNV-1a checksum of every preceding byte.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_M64 = (1 << 64) - 1


def fnv1a_64(data: bytes, h: int = FNV_OFFSET) -> int:
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _M64
    return h


def append_checksum(payload: bytearray) -> bytes:
    """Returns payload + 8-byte LE FNV-1a of the payload."""
    return bytes(payload) + struct.pack("<Q", fnv1a_64(bytes(payload)))


def split_checksummed(blob: bytes, what: str) -> bytes:
    """Verifies and strips the trailing checksum; raises FormatError on mismatch."""
    if len(blob) < 8:
        raise FormatError(f"{what}: file too short to hold a checksum")
    payload, tail = blob[:-8], blob[-8:]
    (stored,) = struct.unpack("<Q", tail)
    actual = fnv1a_64(payload)
    if stored != actual:
        raise FormatError(f"{what}: checksum mismatch (stored {stored:#018x}, computed {actual:#018x})")
    return payload


class ByteReader:
    """Sequential reader that raises FormatError instead of silently truncating."""

    def __init__(self, data: bytes, what: str):
        self._data = data
        self._pos = 0
        self._what = what

    def take(self, n: int, field: str) -> bytes:
        if self._pos + n > len(self._data):
            raise FormatError(f"{self._what}: truncated while reading {field}")
        out = self._data[self._pos:self._pos + n]
        self._pos += n
        return out

    def u8(self, field: str) -> int:
        return self.take(1, field)[0]

    def u16(self, field: str) -> int:
        return struct.unpack("<H", self.take(2, field))[0]

    def u32(self, field: str) -> int:
        return struct.unpack("<I", self.take(4, field))[0]

    def f64_array(self, count: int, field: str) -> np.ndarray:
        raw = self.take(8 * count, field)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64)

    def expect_end(self) -> None:
        if self._pos != len(self._data):
            raise FormatError(f"{self._what}: {len(self._data) - self._pos} unexpected trailing bytes")

    @property
    def exhausted(self) -> bool:
        return self._pos == len(self._data)
