"""Carry-less 32-bit renormalizing range coder.

Subbotin-style coder: bytes are emitted once the top byte of `low` and
`low + range` agree; when the range underflows below 2^16 it is clamped to
the next 2^16 boundary, which keeps carries from ever propagating.  Total
frequency counts must not exceed 2^16.
"""

from __future__ import annotations

MASK32 = 0xFFFFFFFF
TOP = 1 << 24
BOT = 1 << 16
MAX_TOTAL = 1 << 16


class RangeCoderError(ValueError):
    """Raised on invalid frequency tables or truncated payloads."""


class RangeEncoder:
    def __init__(self) -> None:
        self.low = 0
        self.range = MASK32
        self._out = bytearray()

    def encode(self, cum_low: int, cum_high: int, total: int) -> None:
        if not (0 <= cum_low < cum_high <= total <= MAX_TOTAL):
            raise RangeCoderError(
                f"invalid interval [{cum_low}, {cum_high}) / {total}"
            )
        r = self.range // total
        self.low = (self.low + r * cum_low) & MASK32
        if cum_high < total:
            self.range = r * (cum_high - cum_low)
        else:
            # give the last symbol the rounding remainder
            self.range -= r * cum_low
        self._normalize()

    def _normalize(self) -> None:
        while True:
            if (self.low ^ (self.low + self.range)) & MASK32 < TOP:
                pass
            elif self.range < BOT:
                self.range = (-self.low) & (BOT - 1)
            else:
                break
            self._out.append((self.low >> 24) & 0xFF)
            self.low = (self.low << 8) & MASK32
            self.range = (self.range << 8) & MASK32

    def finish(self) -> bytes:
        for _ in range(4):
            self._out.append((self.low >> 24) & 0xFF)
            self.low = (self.low << 8) & MASK32
        return bytes(self._out)


class RangeDecoder:
    def __init__(self, payload: bytes) -> None:
        self._buf = payload
        self._pos = 0
        self.low = 0
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = ((self.code << 8) | self._next_byte()) & MASK32

    def _next_byte(self) -> int:
        if self._pos >= len(self._buf):
            raise RangeCoderError("truncated range-coder payload")
        b = self._buf[self._pos]
        self._pos += 1
        return b

    def decode_freq(self, total: int) -> int:
        """Return the cumulative-frequency position of the next symbol."""
        if not (1 <= total <= MAX_TOTAL):
            raise RangeCoderError(f"invalid total {total}")
        self._r = self.range // total
        v = ((self.code - self.low) & MASK32) // self._r
        if v >= total:
            v = total - 1
        return v

    def decode_update(self, cum_low: int, cum_high: int, total: int) -> None:
        r = self._r
        self.low = (self.low + r * cum_low) & MASK32
        if cum_high < total:
            self.range = r * (cum_high - cum_low)
        else:
            self.range -= r * cum_low
        self._normalize()

    def _normalize(self) -> None:
        while True:
            if (self.low ^ (self.low + self.range)) & MASK32 < TOP:
                pass
            elif self.range < BOT:
                self.range = (-self.low) & (BOT - 1)
            else:
                break
            self.code = ((self.code << 8) | self._next_byte()) & MASK32
            self.low = (self.low << 8) & MASK32
            self.range = (self.range << 8) & MASK32
