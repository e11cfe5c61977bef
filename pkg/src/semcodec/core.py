"""Shared domain types: frames, clips, scale bookkeeping, bitrate accounting.

Everything here is deliberately dumb data plus a few pure functions; the
neural modules build on these contracts. All types are immutable after
construction and safe to share across workers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image

GRID_MULTIPLE = 64

#: Pyramid scales the codec works at. Padding to multiples of 64 guarantees
#: integral spatial dims at every one of them.
VALID_SCALES = (
    Fraction(1),
    Fraction(1, 2),
    Fraction(1, 4),
    Fraction(1, 8),
    Fraction(1, 16),
)


@dataclass(frozen=True)
class Frame:
    """One video frame: 3xHxW float tensor with values in [0, 1]."""

    pixels: torch.Tensor
    timestamp_index: int = 0

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ValueError(f"frame pixels must be 3xHxW, got {tuple(self.pixels.shape)}")
        if self.timestamp_index < 0:
            raise ValueError("timestamp_index must be nonnegative")

    @property
    def height(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[2])


@dataclass(frozen=True)
class Clip:
    """Ordered frames plus GOP structure. Frame 0 of each GOP is the intra position."""

    frames: tuple[Frame, ...]
    gop_size: int
    source_id: str = ""

    def __init__(self, frames: Sequence[Frame], gop_size: int, source_id: str = ""):
        object.__setattr__(self, "frames", tuple(frames))
        object.__setattr__(self, "gop_size", int(gop_size))
        object.__setattr__(self, "source_id", source_id)
        if self.gop_size < 1:
            raise ValueError("gop_size must be positive")

    def __len__(self) -> int:
        return len(self.frames)

    def is_intra_position(self, index: int) -> bool:
        return index % self.gop_size == 0


@dataclass(frozen=True)
class ScaleSpec:
    """A pyramid level: fractional scale plus channel count."""

    scale: Fraction
    channels: int

    def __post_init__(self):
        if self.scale not in VALID_SCALES:
            raise ValueError(f"scale {self.scale} not in {[str(s) for s in VALID_SCALES]}")
        if self.channels < 1:
            raise ValueError("channels must be positive")

    def dims(self, height: int, width: int) -> tuple[int, int]:
        """Spatial dims at this scale: (ceil(H*s), ceil(W*s))."""
        return (
            math.ceil(height * self.scale),
            math.ceil(width * self.scale),
        )


@dataclass(frozen=True)
class RatePoint:
    """One (bpp, metric) point on a rate-task curve."""

    bpp: float
    metric_name: str
    metric_value: float

    def __post_init__(self):
        if self.bpp < 0:
            raise ValueError("bpp must be nonnegative")


@dataclass(frozen=True)
class PadRecord:
    """Bottom/right padding applied by :func:`pad_to_grid`; enables exact crop-back."""

    pad_bottom: int
    pad_right: int

    @property
    def is_zero(self) -> bool:
        return self.pad_bottom == 0 and self.pad_right == 0


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...] = field(default=())

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_clip(clip: Clip) -> ValidationReport:
    """Check a clip against the codec's input contract.

    Report-based: never raises, a valid clip yields an empty violation list.
    """
    violations: list[str] = []
    if len(clip.frames) == 0:
        return ValidationReport(("empty clip",))

    h0, w0 = clip.frames[0].height, clip.frames[0].width
    for i, frame in enumerate(clip.frames):
        if (frame.height, frame.width) != (h0, w0):
            violations.append(
                f"dimension mismatch: frame {i} is {frame.height}x{frame.width}, "
                f"frame 0 is {h0}x{w0}"
            )
        if not torch.isfinite(frame.pixels).all():
            violations.append(f"non-finite pixel values in frame {i}")
        elif frame.pixels.min() < 0 or frame.pixels.max() > 1:
            violations.append(f"pixel values outside [0, 1] in frame {i}")
    padded_h = _round_up(h0, GRID_MULTIPLE)
    padded_w = _round_up(w0, GRID_MULTIPLE)
    if padded_h % GRID_MULTIPLE or padded_w % GRID_MULTIPLE:
        # Unreachable by construction; kept so the report contract is explicit.
        violations.append(f"dims {h0}x{w0} not a multiple of {GRID_MULTIPLE} after padding")
    return ValidationReport(tuple(violations))


def bits_per_pixel(total_bits: float, width: int, height: int, n_frames: int) -> float:
    """total_bits / (width * height * n_frames)."""
    if width <= 0 or height <= 0 or n_frames <= 0:
        raise ValueError("width, height and n_frames must be positive")
    if total_bits < 0:
        raise ValueError("total_bits must be nonnegative")
    return total_bits / (width * height * n_frames)


def _round_up(value: int, multiple: int) -> int:
    return ((value + multiple - 1) // multiple) * multiple


def pad_to_grid(frame: Frame, multiple: int = GRID_MULTIPLE) -> tuple[Frame, PadRecord]:
    """Replicate-pad bottom/right so both dims are multiples of `multiple`."""
    if multiple <= 0:
        raise ValueError("multiple must be positive")
    pad_bottom = _round_up(frame.height, multiple) - frame.height
    pad_right = _round_up(frame.width, multiple) - frame.width
    record = PadRecord(pad_bottom, pad_right)
    if record.is_zero:
        return frame, record
    padded = torch.nn.functional.pad(
        frame.pixels.unsqueeze(0), (0, pad_right, 0, pad_bottom), mode="replicate"
    ).squeeze(0)
    return Frame(padded, frame.timestamp_index), record


def crop_from_grid(frame: Frame, record: PadRecord) -> Frame:
    """Exact inverse of :func:`pad_to_grid`."""
    if record.is_zero:
        return frame
    h = frame.height - record.pad_bottom
    w = frame.width - record.pad_right
    return Frame(frame.pixels[:, :h, :w], frame.timestamp_index)


# ---------------------------------------------------------------------------
# Disk format: numbered PNG folders plus a JSON-lines manifest.
# ---------------------------------------------------------------------------

FRAME_NAME_FORMAT = "{:06d}.png"


def frame_to_uint8(frame: Frame) -> np.ndarray:
    """HxWx3 uint8 view of a frame (round-half-up on the 255 grid)."""
    arr = frame.pixels.detach().cpu().numpy()
    arr = np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)
    return arr.transpose(1, 2, 0)


def frame_from_uint8(arr: np.ndarray, timestamp_index: int = 0) -> Frame:
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("expected HxWx3 uint8 array")
    pixels = torch.from_numpy(arr.astype(np.float32).transpose(2, 0, 1) / 255.0)
    return Frame(pixels, timestamp_index)


def save_clip(clip: Clip, directory: str | Path) -> Path:
    """Write a clip as zero-padded numbered PNGs; returns the directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(clip.frames):
        Image.fromarray(frame_to_uint8(frame)).save(directory / FRAME_NAME_FORMAT.format(i))
    return directory


def load_clip(directory: str | Path, gop_size: int, source_id: str | None = None) -> Clip:
    """Read a numbered-PNG clip directory."""
    directory = Path(directory)
    paths = sorted(directory.glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no PNG frames found in {directory}")
    frames = []
    for i, path in enumerate(paths):
        arr = np.asarray(Image.open(path).convert("RGB"))
        frames.append(frame_from_uint8(arr, timestamp_index=i))
    return Clip(frames, gop_size=gop_size, source_id=source_id or directory.name)


def write_manifest(clips: Iterable[tuple[str, Path, int, int, int]], path: str | Path) -> Path:
    """Write a JSON-lines clip index: (source_id, path, frame_count, height, width)."""
    path = Path(path)
    with path.open("w") as fh:
        for source_id, clip_dir, n_frames, height, width in clips:
            fh.write(
                json.dumps(
                    {
                        "source_id": source_id,
                        "path": str(clip_dir),
                        "frame_count": n_frames,
                        "height": height,
                        "width": width,
                    }
                )
                + "\n"
            )
    return path


def read_manifest(path: str | Path) -> list[dict]:
    entries = []
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if line:
                entries.append(json.loads(line))
    return entries
