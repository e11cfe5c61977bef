"""Synthetic moving-shapes clips with segmentation labels.

Each clip renders 1-3 colored shapes (circle / square / triangle) moving
over a smooth gradient background, with per-frame class masks.  Generators
are pure functions of their seed, so datasets never need to touch disk.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .config import DataConfig
from .core import Clip, Frame

NUM_CLASSES = 4  # background + 3 shape classes
CLASS_NAMES = ("background", "circle", "square", "triangle")


@dataclass(frozen=True)
class LabeledClip:
    clip: Clip
    masks: torch.Tensor       # (T, H, W) int64 class ids
    classes: tuple[int, ...]  # shape classes present (excluding background)

    def frames_tensor(self) -> torch.Tensor:
        return torch.stack([f.pixels for f in self.clip.frames])


def _background(rng: np.random.Generator, h: int, w: int, t_shift: float = 0.0) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    xx = xx - t_shift
    img = np.empty((3, h, w), dtype=np.float64)
    for c in range(3):
        base = rng.uniform(0.25, 0.55)
        gx = rng.uniform(-0.15, 0.15)
        gy = rng.uniform(-0.15, 0.15)
        amp = rng.uniform(0.02, 0.06)
        phase = rng.uniform(0, 2 * np.pi)
        img[c] = (
            base + gx * xx / w + gy * yy / h
            + amp * np.sin(2 * np.pi * xx / w * 2 + phase)
        )
    return np.clip(img, 0.0, 1.0)


def _shape_mask(kind: int, cx: float, cy: float, size: float, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == 1:  # circle
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= size ** 2
    if kind == 2:  # square
        return (np.abs(xx - cx) <= size) & (np.abs(yy - cy) <= size)
    if kind == 3:  # triangle (apex up)
        v0 = (cx, cy - size)
        v1 = (cx - size, cy + size)
        v2 = (cx + size, cy + size)

        def half_plane(p, q):
            return (q[0] - p[0]) * (yy - p[1]) - (q[1] - p[1]) * (xx - p[0])

        d0 = half_plane(v0, v1)
        d1 = half_plane(v1, v2)
        d2 = half_plane(v2, v0)
        neg = (d0 < 0) & (d1 < 0) & (d2 < 0)
        pos = (d0 > 0) & (d1 > 0) & (d2 > 0)
        return neg | pos
    raise ValueError(f"unknown shape kind {kind}")


@dataclass
class _Shape:
    kind: int
    cx: float
    cy: float
    vx: float
    vy: float
    size: float
    color: np.ndarray

    def step(self, h: int, w: int) -> None:
        self.cx += self.vx
        self.cy += self.vy
        if not (self.size <= self.cx <= w - self.size):
            self.vx = -self.vx
            self.cx += 2 * self.vx
        if not (self.size <= self.cy <= h - self.size):
            self.vy = -self.vy
            self.cy += 2 * self.vy


# Class-correlated color families (with per-shape jitter): keeps the task
# learnable at 64x64 while leaving plenty of appearance variation, the way
# real object categories carry texture statistics.
_CLASS_COLORS = {
    1: np.array([0.85, 0.25, 0.25]),   # circles skew red
    2: np.array([0.20, 0.80, 0.30]),   # squares skew green
    3: np.array([0.25, 0.35, 0.90]),   # triangles skew blue
}


def _spawn_shapes(rng: np.random.Generator, n: int, h: int, w: int,
                  moving: bool = True) -> list[_Shape]:
    shapes = []
    kinds = rng.permutation([1, 2, 3])[:n] if n <= 3 else rng.integers(1, 4, size=n)
    for kind in kinds:
        size = rng.uniform(0.09, 0.16) * min(h, w)
        color = np.clip(_CLASS_COLORS[int(kind)] + rng.uniform(-0.15, 0.15, size=3), 0.0, 1.0)
        shapes.append(_Shape(
            kind=int(kind),
            cx=rng.uniform(size, w - size),
            cy=rng.uniform(size, h - size),
            vx=rng.uniform(-2.5, 2.5) if moving else 0.0,
            vy=rng.uniform(-2.5, 2.5) if moving else 0.0,
            size=size,
            color=color,
        ))
    return shapes


def _render(bg: np.ndarray, shapes: list[_Shape], h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    img = bg.copy()
    mask = np.zeros((h, w), dtype=np.int64)
    for s in shapes:
        m = _shape_mask(s.kind, s.cx, s.cy, s.size, h, w)
        img[:, m] = s.color[:, None]
        mask[m] = s.kind
    return img, mask


def make_labeled_clip(
    seed: int,
    n_frames: int = 8,
    height: int = 64,
    width: int = 64,
    max_shapes: int = 3,
    gop_size: int = 6,
    moving: bool = True,
) -> LabeledClip:
    rng = np.random.default_rng(seed)
    n_shapes = int(rng.integers(1, max_shapes + 1))
    shapes = _spawn_shapes(rng, n_shapes, height, width, moving=moving)
    bg_rng_state = rng.bit_generator.state
    frames: list[Frame] = []
    masks: list[np.ndarray] = []
    for t in range(n_frames):
        rng.bit_generator.state = bg_rng_state  # same background every frame
        bg = _background(rng, height, width)
        img, mask = _render(bg, shapes, height, width)
        frames.append(Frame(pixels=torch.from_numpy(img.astype(np.float32)), timestamp_index=t))
        masks.append(mask)
        for s in shapes:
            s.step(height, width)
    clip = Clip(frames=tuple(frames), gop_size=gop_size, source_id=f"shapes-{seed}")
    return LabeledClip(
        clip=clip,
        masks=torch.from_numpy(np.stack(masks)),
        classes=tuple(sorted({s.kind for s in shapes})),
    )


def make_static_clip(seed: int, n_frames: int = 4, height: int = 64, width: int = 64) -> LabeledClip:
    """All-zero motion: every frame identical."""
    return make_labeled_clip(seed, n_frames, height, width, moving=False)


def make_shifted_clip(
    seed: int, dx: float = 4.0, n_frames: int = 4, height: int = 64, width: int = 64,
) -> LabeledClip:
    """Whole scene translates horizontally by dx pixels per frame."""
    rng = np.random.default_rng(seed)
    shapes = _spawn_shapes(rng, 2, height, width, moving=False)
    for s in shapes:
        # keep the trajectory inside the frame across all steps
        travel = abs(dx) * (n_frames - 1)
        s.cx = float(np.clip(s.cx, s.size + travel, width - s.size - travel) if
                     width - 2 * (s.size + travel) > 0 else width / 2)
    bg_state = rng.bit_generator.state
    frames, masks = [], []
    for t in range(n_frames):
        rng.bit_generator.state = bg_state
        bg = _background(rng, height, width, t_shift=dx * t)
        moved = [
            _Shape(s.kind, s.cx + dx * t, s.cy, 0.0, 0.0, s.size, s.color)
            for s in shapes
        ]
        img, mask = _render(bg, moved, height, width)
        frames.append(Frame(pixels=torch.from_numpy(img.astype(np.float32)), timestamp_index=t))
        masks.append(mask)
    clip = Clip(frames=tuple(frames), gop_size=n_frames, source_id=f"shifted-{seed}")
    return LabeledClip(clip=clip, masks=torch.from_numpy(np.stack(masks)),
                       classes=tuple(sorted({s.kind for s in shapes})))


def make_gray_frames(n_frames: int, height: int = 64, width: int = 64) -> torch.Tensor:
    """Degenerate all-gray frames (chance-level task input)."""
    return torch.full((n_frames, 3, height, width), 0.5)


def make_probe_image(seed: int, class_id: int, height: int = 64, width: int = 64) -> tuple[torch.Tensor, int]:
    """One centered shape of the requested class on a plain background."""
    if class_id not in (1, 2, 3):
        raise ValueError("class_id must be 1 (circle), 2 (square), or 3 (triangle)")
    rng = np.random.default_rng(seed)
    bg = _background(rng, height, width)
    size = rng.uniform(0.14, 0.2) * min(height, width)
    shape = _Shape(
        kind=class_id,
        cx=width / 2 + rng.uniform(-4, 4),
        cy=height / 2 + rng.uniform(-4, 4),
        vx=0.0, vy=0.0, size=size,
        color=rng.uniform(0.05, 0.95, size=3),
    )
    img, _ = _render(bg, [shape], height, width)
    return torch.from_numpy(img.astype(np.float32)), class_id


class ClipDataset:
    """Deterministic synthetic dataset; clip i is a pure function of
    (base_seed, i)."""

    def __init__(self, cfg: DataConfig, base_seed: int = 0):
        cfg.validate()
        if cfg.kind != "synthetic":
            raise ValueError("ClipDataset only serves synthetic data; use load_clip for folders")
        self.cfg = cfg
        self.base_seed = base_seed

    def __len__(self) -> int:
        return self.cfg.num_clips

    def labeled(self, index: int) -> LabeledClip:
        if not (0 <= index < len(self)):
            raise IndexError(index)
        return make_labeled_clip(
            seed=self.base_seed * 100_003 + index,
            n_frames=self.cfg.frames_per_clip,
            height=self.cfg.height,
            width=self.cfg.width,
            max_shapes=self.cfg.max_shapes,
        )

    def sample_batch(
        self, rng: np.random.Generator, gop_len: int, batch: int,
    ) -> torch.Tensor:
        """(T, B, 3, H, W) windows of gop_len consecutive frames."""
        clips = []
        for _ in range(batch):
            idx = int(rng.integers(0, len(self)))
            lc = self.labeled(idx)
            t = lc.frames_tensor()
            if t.shape[0] < gop_len:
                reps = -(-gop_len // t.shape[0])
                t = t.repeat(reps, 1, 1, 1)
            start = int(rng.integers(0, t.shape[0] - gop_len + 1))
            clips.append(t[start:start + gop_len])
        return torch.stack(clips, dim=1)
