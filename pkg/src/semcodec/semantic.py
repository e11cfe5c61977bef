"""Machine-oriented semantic decoder.

Recovers the context latent from 1/16 back to full resolution through four
bottleneck residual blocks interleaved with 2x upsampling stages, exposing
taps at 1/16, 1/8, and 1/4 for the entropy-constraint losses.  c3 is fused
(concat + projection) before the 1/4 block, c2 before the 1/2 block; a final
upsampling head brings the feature to full resolution for fusion.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig
from .layers import BottleneckResBlock, UpsampleConv, conv1x1


@dataclass(frozen=True)
class SemanticTapSet:
    tap_1_16: torch.Tensor
    tap_1_8: torch.Tensor
    tap_1_4: torch.Tensor
    f_mvs_full: torch.Tensor

    def __post_init__(self) -> None:
        h, w = self.f_mvs_full.shape[-2:]
        expect = {
            "tap_1_16": (h // 16, w // 16),
            "tap_1_8": (h // 8, w // 8),
            "tap_1_4": (h // 4, w // 4),
        }
        for name, dims in expect.items():
            t = getattr(self, name)
            if t.shape[-2:] != dims:
                raise ValueError(f"{name} has dims {tuple(t.shape[-2:])}, expected {dims}")
            if not torch.isfinite(t).all():
                raise ValueError(f"{name} contains non-finite values")

    def by_scale(self) -> dict[int, torch.Tensor]:
        """Taps keyed by scale denominator."""
        return {16: self.tap_1_16, 8: self.tap_1_8, 4: self.tap_1_4}


def tap_channels(cfg: ModelConfig) -> dict[int, int]:
    """Channel count of each semantic tap, keyed by scale denominator."""
    return {16: cfg.ch_latent, 8: cfg.ch_quarter, 4: cfg.ch_quarter}


class SemanticDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.block16 = BottleneckResBlock(cfg.ch_latent)
        self.up8 = UpsampleConv(cfg.ch_latent, cfg.ch_quarter)
        self.block8 = BottleneckResBlock(cfg.ch_quarter)
        self.up4 = UpsampleConv(cfg.ch_quarter, cfg.ch_quarter)
        self.fuse4 = conv1x1(2 * cfg.ch_quarter, cfg.ch_quarter)
        self.block4 = BottleneckResBlock(cfg.ch_quarter)
        self.up2 = UpsampleConv(cfg.ch_quarter, cfg.ch_half)
        self.fuse2 = conv1x1(2 * cfg.ch_half, cfg.ch_half)
        self.block2 = BottleneckResBlock(cfg.ch_half)
        self.head = UpsampleConv(cfg.ch_half, cfg.ch_full)

    def forward(self, y_ctx_hat: torch.Tensor, c2: torch.Tensor, c3: torch.Tensor) -> SemanticTapSet:
        h16, w16 = y_ctx_hat.shape[-2:]
        if c3.shape[-2:] != (h16 * 4, w16 * 4):
            raise ValueError("c3 must sit at 1/4 resolution relative to the latent")
        if c2.shape[-2:] != (h16 * 8, w16 * 8):
            raise ValueError("c2 must sit at 1/2 resolution relative to the latent")

        t16 = self.block16(y_ctx_hat)
        t8 = self.block8(self.up8(t16))
        h = self.up4(t8)
        t4 = self.block4(self.fuse4(torch.cat([h, c3], dim=1)))
        h = self.up2(t4)
        h = self.block2(self.fuse2(torch.cat([h, c2], dim=1)))
        full = self.head(h)
        return SemanticTapSet(tap_1_16=t16, tap_1_8=t8, tap_1_4=t4, f_mvs_full=full)
