"""Byte-oriented range coder (LZMA-style carry handling).

Symbols are coded against integer cumulative-frequency tables with
total <= 2^16; encoder and decoder must be driven with identical tables.
Overhead over the ideal codelength is bounded by the 5-byte flush plus
rounding of the per-symbol range division.
"""

from __future__ import annotations

_TOP = 1 << 24
_MASK32 = (1 << 32) - 1
MAX_TOTAL = 1 << 16


class RangeEncoder:
    def __init__(self):
        self.low = 0  # up to 33 bits while a carry is pending
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1  # leading dummy byte, skipped by the decoder
        self.out = bytearray()

    def _shift_low(self) -> None:
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            self.out.append((self.cache + carry) & 0xFF)
            for _ in range(self.cache_size - 1):
                self.out.append((0xFF + carry) & 0xFF)
            self.cache_size = 0
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low << 8) & _MASK32

    def encode(self, cum: int, freq: int, total: int) -> None:
        if freq <= 0 or cum < 0 or cum + freq > total or total > MAX_TOTAL:
            raise ValueError("bad frequency table entry")
        r = self.range // total
        self.low += r * cum
        self.range = r * freq
        while self.range < _TOP:
            self.range = (self.range << 8) & _MASK32
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 1  # skip the encoder's leading dummy byte
        self.range = _MASK32
        self.code = 0
        self._r = 1
        for _ in range(4):
            self.code = ((self.code << 8) | self._byte()) & _MASK32

    def _byte(self) -> int:
        b = self.data[self.pos] if self.pos < len(self.data) else 0
        self.pos += 1
        return b

    def decode_target(self, total: int) -> int:
        """Value in [0, total) locating the next symbol in the cum table."""
        self._r = self.range // total
        return min(self.code // self._r, total - 1)

    def advance(self, cum: int, freq: int) -> None:
        self.code -= cum * self._r
        self.range = self._r * freq
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._byte()) & _MASK32
            self.range = (self.range << 8) & _MASK32
