"""Optical-flow estimation and bilinear warping.

The warp works in pixel coordinates with explicit corner gathering rather
than `grid_sample` so that zero and integer-valued flows reproduce the
reference exactly (grid_sample's normalized coordinates introduce rounding
at half-pixel alignments).
"""

from __future__ import annotations

import torch
from torch import nn

from .layers import conv3x3


def warp(feature: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp `feature` by `flow` (pixel units).

    feature: (B, C, H, W); flow: (B, 2, H, W) with channel 0 = horizontal
    displacement dx, channel 1 = vertical displacement dy.  Output at (y, x)
    samples feature at (y + dy, x + dx) with bilinear interpolation and
    border replication.
    """
    if feature.dim() != 4 or flow.dim() != 4:
        raise ValueError("warp expects 4-D feature and flow tensors")
    b, c, h, w = feature.shape
    if flow.shape != (b, 2, h, w):
        raise ValueError(
            f"flow shape {tuple(flow.shape)} does not match feature {(b, 2, h, w)}"
        )

    device = feature.device
    dtype = feature.dtype
    xs = torch.arange(w, device=device, dtype=dtype).view(1, 1, 1, w)
    ys = torch.arange(h, device=device, dtype=dtype).view(1, 1, h, 1)
    px = xs + flow[:, 0:1]
    py = ys + flow[:, 1:2]

    x0 = torch.floor(px)
    y0 = torch.floor(py)
    fx = px - x0
    fy = py - y0

    x0l = x0.long()
    y0l = y0.long()
    x0c = x0l.clamp(0, w - 1)
    x1c = (x0l + 1).clamp(0, w - 1)
    y0c = y0l.clamp(0, h - 1)
    y1c = (y0l + 1).clamp(0, h - 1)

    flat = feature.reshape(b, c, h * w)

    def gather(yi: torch.Tensor, xi: torch.Tensor) -> torch.Tensor:
        idx = (yi * w + xi).reshape(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).reshape(b, c, h, w)

    v00 = gather(y0c, x0c)
    v01 = gather(y0c, x1c)
    v10 = gather(y1c, x0c)
    v11 = gather(y1c, x1c)

    top = v00 + (v01 - v00) * fx
    bot = v10 + (v11 - v10) * fx
    return top + (bot - top) * fy


def _avg_pool(x: torch.Tensor) -> torch.Tensor:
    return nn.functional.avg_pool2d(x, kernel_size=2, stride=2)


def upsample_flow(flow: torch.Tensor) -> torch.Tensor:
    """Double the resolution of a flow field, scaling displacements by 2."""
    return 2.0 * nn.functional.interpolate(
        flow, scale_factor=2, mode="bilinear", align_corners=False
    )


class _FlowRefiner(nn.Module):
    """Per-level residual flow predictor."""

    def __init__(self, hidden: int = 32):
        super().__init__()
        act = nn.LeakyReLU(0.1, inplace=True)
        self.net = nn.Sequential(
            conv3x3(8, hidden), act,
            conv3x3(hidden, hidden), act,
            conv3x3(hidden, hidden // 2), act,
            conv3x3(hidden // 2, 2),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class FlowEstimator(nn.Module):
    """Coarse-to-fine pyramid flow estimator.

    Builds `levels` average-pooled pyramids of both frames, starts from zero
    flow at the coarsest level, and refines the upsampled estimate with a
    small per-level CNN fed (current frame, warped reference, flow).
    """

    def __init__(self, levels: int = 3, hidden: int = 32):
        super().__init__()
        if levels < 1:
            raise ValueError("levels must be >= 1")
        self.levels = levels
        self.refiners = nn.ModuleList(_FlowRefiner(hidden) for _ in range(levels))

    def forward(self, cur: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
        if cur.shape != ref.shape:
            raise ValueError("current/reference frame shapes differ")
        pyr_cur = [cur]
        pyr_ref = [ref]
        for _ in range(self.levels - 1):
            pyr_cur.append(_avg_pool(pyr_cur[-1]))
            pyr_ref.append(_avg_pool(pyr_ref[-1]))

        b, _, hc, wc = pyr_cur[-1].shape
        flow = torch.zeros(b, 2, hc, wc, device=cur.device, dtype=cur.dtype)
        for level in range(self.levels - 1, -1, -1):
            if flow.shape[-2:] != pyr_cur[level].shape[-2:]:
                flow = upsample_flow(flow)
            warped = warp(pyr_ref[level], flow)
            inp = torch.cat([pyr_cur[level], warped, flow], dim=1)
            flow = flow + self.refiners[level](inp)
        return flow
