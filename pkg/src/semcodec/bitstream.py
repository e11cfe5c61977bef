"""SECV bitstream container.

Layout (all integers little-endian):
  magic "SECV" | version u8 | width u16 | height u16 | gop_size u8 |
  quality_index u8 | per frame, until end of stream:
    flags u8 (bit0: intra, i.e. coded against a zero reference) |
    mv_len u32 | mv payload | ctx_len u32 | ctx payload

There is no frame count field: records run to the end of the container, so
any truncation lands inside a record and is detected as such.  Width/height
are the pre-padding frame dimensions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

MAGIC = b"SECV"
VERSION = 1

_HEADER = struct.Struct("<4sBHHBB")
_U8 = struct.Struct("<B")
_U32 = struct.Struct("<I")

FLAG_INTRA = 0x01


class BitstreamError(ValueError):
    """Malformed, truncated, or wrong-magic container data."""


@dataclass(frozen=True)
class FrameRecord:
    intra: bool
    mv_payload: bytes
    ctx_payload: bytes

    @property
    def total_bits(self) -> int:
        # 1 flags byte + two u32 length prefixes + both payloads
        return 8 * (1 + 4 + len(self.mv_payload) + 4 + len(self.ctx_payload))


@dataclass(frozen=True)
class StreamHeader:
    width: int
    height: int
    gop_size: int
    quality_index: int

    def __post_init__(self) -> None:
        if not (1 <= self.width <= 0xFFFF and 1 <= self.height <= 0xFFFF):
            raise BitstreamError("frame dimensions out of u16 range")
        if not (1 <= self.gop_size <= 0xFF):
            raise BitstreamError("gop_size out of u8 range")
        if not (0 <= self.quality_index <= 0xFF):
            raise BitstreamError("quality_index out of u8 range")

    @property
    def size_bytes(self) -> int:
        return _HEADER.size


def pack_stream(header: StreamHeader, frames: list[FrameRecord]) -> bytes:
    out = bytearray()
    out += _HEADER.pack(
        MAGIC, VERSION, header.width, header.height,
        header.gop_size, header.quality_index,
    )
    for fr in frames:
        flags = FLAG_INTRA if fr.intra else 0
        out += _U8.pack(flags)
        out += _U32.pack(len(fr.mv_payload))
        out += fr.mv_payload
        out += _U32.pack(len(fr.ctx_payload))
        out += fr.ctx_payload
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise BitstreamError("truncated stream")
        chunk = self._data[self._pos:self._pos + n]
        self._pos += n
        return chunk

    def done(self) -> bool:
        return self._pos == len(self._data)


def unpack_stream(data: bytes) -> tuple[StreamHeader, list[FrameRecord]]:
    rd = _Reader(data)
    magic, version, width, height, gop, quality = _HEADER.unpack(rd.take(_HEADER.size))
    if magic != MAGIC:
        raise BitstreamError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BitstreamError(f"unsupported version {version}")
    header = StreamHeader(width=width, height=height, gop_size=gop, quality_index=quality)
    frames: list[FrameRecord] = []
    while not rd.done():
        (flags,) = _U8.unpack(rd.take(1))
        (mv_len,) = _U32.unpack(rd.take(4))
        mv = rd.take(mv_len)
        (ctx_len,) = _U32.unpack(rd.take(4))
        ctx = rd.take(ctx_len)
        frames.append(FrameRecord(intra=bool(flags & FLAG_INTRA), mv_payload=mv, ctx_payload=ctx))
    if not frames:
        raise BitstreamError("container holds no frame records")
    return header, frames
