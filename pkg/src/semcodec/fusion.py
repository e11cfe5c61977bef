"""Semantic-pixel dual-path fusion.

The semantic branch transforms the full-resolution decoder feature through
two stacked U-Nets (c1 conditions only the first); a per-channel sigmoid
gate convexly combines it with f_pixel, and a refinement U-Net plus output
conv produce the machine-oriented frame.  The gate and the pre-refinement
fused map are exposed for probing; alpha can be forced to a constant, and
concat / add / semantic-only fusion are selectable for the ablations.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig
from .layers import BottleneckResBlock, UNet, conv1x1, conv3x3


@dataclass(frozen=True)
class FusionOutput:
    x_hat: torch.Tensor          # (B, 3, H, W), clamped to [0,1]
    alpha: torch.Tensor | None   # gate map, None for non-gated modes
    fused: torch.Tensor          # pre-refinement fused feature
    f_semantic: torch.Tensor


class SPDFusion(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.ch_full
        self.mode = cfg.fusion_mode
        self.sem_unet1 = UNet(2 * c, c, base=max(c // 2, 8))
        self.sem_unet2 = UNet(c, c, base=max(c // 2, 8))
        self.gate = nn.Sequential(BottleneckResBlock(2 * c), conv1x1(2 * c, c))
        self.concat_proj = conv1x1(2 * c, c)
        self.refine = UNet(c, c, base=max(c // 2, 8))
        self.out_conv = conv3x3(c, 3)

    def compute_gate(
        self,
        f_mvs_full: torch.Tensor,
        f_pixel: torch.Tensor,
        forced_logit: torch.Tensor | float | None = None,
    ) -> torch.Tensor:
        if f_mvs_full.shape[-2:] != f_pixel.shape[-2:]:
            raise ValueError("gate inputs must share spatial dims")
        if forced_logit is not None:
            logit = torch.as_tensor(forced_logit, dtype=f_pixel.dtype,
                                    device=f_pixel.device).expand_as(f_pixel)
        else:
            logit = self.gate(torch.cat([f_mvs_full, f_pixel], dim=1))
        return torch.sigmoid(logit)

    def semantic_branch(self, f_mvs_full: torch.Tensor, c1: torch.Tensor) -> torch.Tensor:
        if f_mvs_full.shape[-2:] != c1.shape[-2:]:
            raise ValueError("c1 must be at full resolution")
        return self.sem_unet2(self.sem_unet1(torch.cat([f_mvs_full, c1], dim=1)))

    def forward(
        self,
        f_mvs_full: torch.Tensor,
        f_pixel: torch.Tensor,
        c1: torch.Tensor,
        forced_alpha: torch.Tensor | float | None = None,
    ) -> FusionOutput:
        f_semantic = self.semantic_branch(f_mvs_full, c1)
        if f_semantic.shape != f_pixel.shape:
            raise ValueError("f_semantic/f_pixel shape mismatch")

        alpha: torch.Tensor | None = None
        if self.mode == "gated":
            if forced_alpha is not None:
                alpha = torch.as_tensor(forced_alpha, dtype=f_pixel.dtype,
                                        device=f_pixel.device).expand_as(f_pixel)
            else:
                alpha = self.compute_gate(f_mvs_full, f_pixel)
            fused = alpha * f_semantic + (1.0 - alpha) * f_pixel
        elif self.mode == "concat":
            fused = self.concat_proj(torch.cat([f_semantic, f_pixel], dim=1))
        elif self.mode == "add":
            fused = f_semantic + f_pixel
        elif self.mode == "semantic_only":
            fused = f_semantic
        else:
            raise ValueError(f"unknown fusion mode {self.mode!r}")

        x_hat = self.out_conv(self.refine(fused)).clamp(0.0, 1.0)
        return FusionOutput(x_hat=x_hat, alpha=alpha, fused=fused, f_semantic=f_semantic)
