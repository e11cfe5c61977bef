"""Conditional inter-frame coding loop: motion compensation into a context
pyramid, contextual encoding to the 1/16 latent, and the pixel-path decode.

The reference state propagated between frames is a FeatureBuffer holding the
previous pixel-path reconstruction and the decoder's last hidden feature map.
I-frames are coded as P-frames against an all-zero buffer.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig
from .entropy import LatentGrid, lower_bound, scale_from_raw, SIGMA_MIN, DistributionParams
from .layers import BottleneckResBlock, DownConv, UpsampleConv, conv1x1, conv3x3
from .motion import warp


@dataclass(frozen=True)
class FeatureBuffer:
    """Reference state for the next P-frame: pixels + hidden features."""

    pixels: torch.Tensor    # (B, 3, H, W), previous pixel-path reconstruction
    features: torch.Tensor  # (B, ch_full, H, W)

    def __post_init__(self) -> None:
        if self.pixels.shape[-2:] != self.features.shape[-2:]:
            raise ValueError("buffer pixel/feature spatial dims differ")


def zero_buffer(batch: int, height: int, width: int, ch_full: int,
                device: torch.device | str = "cpu",
                dtype: torch.dtype = torch.float32) -> FeatureBuffer:
    """All-zero reference used at intra positions."""
    return FeatureBuffer(
        pixels=torch.zeros(batch, 3, height, width, device=device, dtype=dtype),
        features=torch.zeros(batch, ch_full, height, width, device=device, dtype=dtype),
    )


@dataclass(frozen=True)
class ContextPyramid:
    c1: torch.Tensor  # full resolution
    c2: torch.Tensor  # 1/2
    c3: torch.Tensor  # 1/4

    def __post_init__(self) -> None:
        h, w = self.c1.shape[-2:]
        if self.c2.shape[-2:] != (h // 2, w // 2) or self.c3.shape[-2:] != (h // 4, w // 4):
            raise ValueError("context pyramid scales must be {1, 1/2, 1/4}")
        for t in (self.c1, self.c2, self.c3):
            if not torch.isfinite(t).all():
                raise ValueError("non-finite context feature")


@dataclass(frozen=True)
class PixelDecodeOutput:
    f_pixel: torch.Tensor  # (B, ch_full, H, W)
    x_bar: torch.Tensor    # (B, 3, H, W) in [0,1]
    x_m: torch.Tensor      # (B, 3, H, W) in [0,1]


def scaled_flow(flow: torch.Tensor, factor: int) -> torch.Tensor:
    """Downsample a flow field by `factor`, rescaling displacements."""
    if factor == 1:
        return flow
    return nn.functional.avg_pool2d(flow, kernel_size=factor, stride=factor) / factor


class ContextBuilder(nn.Module):
    """Multi-scale feature extraction from the buffer, then per-scale warping.

    Refinement happens before warping so that zero flow reproduces the
    buffer's own pyramid exactly.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        act = nn.LeakyReLU(0.1, inplace=True)
        self.head = nn.Sequential(
            conv3x3(3 + cfg.ch_full, cfg.ch_full), act,
            BottleneckResBlock(cfg.ch_full),
        )
        self.down1 = nn.Sequential(DownConv(cfg.ch_full, cfg.ch_half), BottleneckResBlock(cfg.ch_half))
        self.down2 = nn.Sequential(DownConv(cfg.ch_half, cfg.ch_quarter), BottleneckResBlock(cfg.ch_quarter))

    def pyramid(self, buffer: FeatureBuffer) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        f1 = self.head(torch.cat([buffer.pixels, buffer.features], dim=1))
        f2 = self.down1(f1)
        f3 = self.down2(f2)
        return f1, f2, f3

    def forward(self, buffer: FeatureBuffer, flow: torch.Tensor) -> ContextPyramid:
        if flow.shape[-2:] != buffer.pixels.shape[-2:]:
            raise ValueError("flow dims do not match buffer")
        f1, f2, f3 = self.pyramid(buffer)
        c1 = warp(f1, flow)
        c2 = warp(f2, scaled_flow(flow, 2))
        c3 = warp(f3, scaled_flow(flow, 4))
        return ContextPyramid(c1=c1, c2=c2, c3=c3)


class ContextualEncoder(nn.Module):
    """(frame, context pyramid) -> continuous latent at 1/16."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        act = nn.LeakyReLU(0.1, inplace=True)
        self.stage1 = nn.Sequential(conv3x3(3 + cfg.ch_full, cfg.ch_half, stride=2), act)
        self.stage2 = nn.Sequential(conv3x3(2 * cfg.ch_half, cfg.ch_quarter, stride=2), act)
        self.stage3 = nn.Sequential(
            conv3x3(2 * cfg.ch_quarter, cfg.ch_quarter, stride=2), act,
            BottleneckResBlock(cfg.ch_quarter),
        )
        self.stage4 = nn.Sequential(
            conv3x3(cfg.ch_quarter, cfg.ch_latent, stride=2),
            BottleneckResBlock(cfg.ch_latent),
        )

    def forward(self, x: torch.Tensor, ctx: ContextPyramid) -> torch.Tensor:
        h = self.stage1(torch.cat([x, ctx.c1], dim=1))
        h = self.stage2(torch.cat([h, ctx.c2], dim=1))
        h = self.stage3(torch.cat([h, ctx.c3], dim=1))
        return self.stage4(h)


class PixelDecoder(nn.Module):
    """Latent + contexts -> full-resolution hidden feature f_pixel and x_bar."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        act = nn.LeakyReLU(0.1, inplace=True)
        self.up3 = nn.Sequential(UpsampleConv(cfg.ch_latent, cfg.ch_quarter), act,
                                 BottleneckResBlock(cfg.ch_quarter))
        self.up2 = UpsampleConv(cfg.ch_quarter, cfg.ch_quarter)
        self.fuse2 = nn.Sequential(conv3x3(2 * cfg.ch_quarter, cfg.ch_quarter), act,
                                   BottleneckResBlock(cfg.ch_quarter))
        self.up1 = UpsampleConv(cfg.ch_quarter, cfg.ch_half)
        self.fuse1 = nn.Sequential(conv3x3(2 * cfg.ch_half, cfg.ch_half), act)
        self.up0 = UpsampleConv(cfg.ch_half, cfg.ch_full)
        self.fuse0 = nn.Sequential(conv3x3(2 * cfg.ch_full, cfg.ch_full), act,
                                   BottleneckResBlock(cfg.ch_full))
        self.recon = nn.Sequential(BottleneckResBlock(cfg.ch_full), conv3x3(cfg.ch_full, 3))

    def forward(self, y_hat: torch.Tensor, ctx: ContextPyramid) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.up3(y_hat)                                   # 1/8
        h = self.fuse2(torch.cat([self.up2(h), ctx.c3], 1))   # 1/4
        h = self.fuse1(torch.cat([self.up1(h), ctx.c2], 1))   # 1/2
        f_pixel = self.fuse0(torch.cat([self.up0(h), ctx.c1], 1))
        x_bar = self.recon(f_pixel).clamp(0.0, 1.0)
        return f_pixel, x_bar


class MotionCoder(nn.Module):
    """Flow field <-> motion latent at 1/16."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.ch_motion_latent
        act = nn.LeakyReLU(0.1, inplace=True)
        self.enc = nn.Sequential(
            conv3x3(2, c, stride=2), act,
            conv3x3(c, c, stride=2), act,
            conv3x3(c, c, stride=2), act,
            BottleneckResBlock(c),
            conv3x3(c, c, stride=2),
        )
        self.dec = nn.Sequential(
            BottleneckResBlock(c),
            UpsampleConv(c, c), act,
            UpsampleConv(c, c), act,
            UpsampleConv(c, c // 2), act,
            UpsampleConv(c // 2, 2),
        )

    def encode(self, flow: torch.Tensor) -> torch.Tensor:
        return self.enc(flow)

    def decode(self, y_mv_hat: torch.Tensor) -> torch.Tensor:
        return self.dec(y_mv_hat)


class FactorizedMotionPrior(nn.Module):
    """Learnable per-channel (mu, sigma) for the motion latent."""

    def __init__(self, channels: int):
        super().__init__()
        self.mu = nn.Parameter(torch.zeros(channels))
        self.raw_sigma = nn.Parameter(torch.zeros(channels))

    def forward(self, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        shape = (1, -1, 1, 1)
        mu = self.mu.view(shape).expand_as(like)
        sigma = scale_from_raw(self.raw_sigma).view(shape).expand_as(like)
        return mu, sigma


class ContextPrior(nn.Module):
    """Temporal prior for the context latent, conditioned on c3."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        act = nn.LeakyReLU(0.1, inplace=True)
        self.net = nn.Sequential(
            conv3x3(cfg.ch_quarter, cfg.ch_quarter, stride=2), act,
            conv3x3(cfg.ch_quarter, cfg.ch_latent, stride=2), act,
            BottleneckResBlock(cfg.ch_latent),
            conv1x1(cfg.ch_latent, 2 * cfg.ch_latent),
        )
        self.ch_latent = cfg.ch_latent

    def forward(self, c3: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.net(c3)
        mu, raw = out.split(self.ch_latent, dim=1)
        return mu, scale_from_raw(raw)


class QualityGains(nn.Module):
    """Per-quality, per-channel latent gains, monotone in the quality index.

    Gains are exp(base + cumsum(softplus(steps))), so g[q+1] > g[q] holds for
    every channel by construction.  `interpolate(t)` maps a continuous
    position t in [0, Q-1] to a log-linear blend of adjacent rows, coupling
    the sampled lambda to the gain vectors during training.
    """

    def __init__(self, num_qualities: int, channels: int):
        super().__init__()
        if num_qualities < 1:
            raise ValueError("need at least one quality level")
        self.num_qualities = num_qualities
        self.base = nn.Parameter(torch.zeros(channels))
        self.steps = nn.Parameter(
            torch.full((max(num_qualities - 1, 1), channels), -1.0)
        )

    def log_gains(self) -> torch.Tensor:
        if self.num_qualities == 1:
            return self.base.unsqueeze(0)
        inc = nn.functional.softplus(self.steps) + 1e-4
        levels = torch.cumsum(inc, dim=0)
        return torch.cat([self.base.unsqueeze(0), self.base.unsqueeze(0) + levels], dim=0)

    def gain(self, quality: int) -> torch.Tensor:
        if not (0 <= quality < self.num_qualities):
            raise ValueError(f"quality index {quality} out of range")
        return torch.exp(self.log_gains()[quality]).view(1, -1, 1, 1)

    def interpolate(self, t: float | torch.Tensor) -> torch.Tensor:
        lg = self.log_gains()
        t = torch.as_tensor(t, dtype=lg.dtype, device=lg.device)
        t = t.clamp(0.0, float(self.num_qualities - 1))
        lo = t.floor().long().clamp(max=self.num_qualities - 1)
        hi = (lo + 1).clamp(max=self.num_qualities - 1)
        frac = (t - lo.to(lg.dtype)).view(-1, 1)
        mix = (1 - frac) * lg[lo] + frac * lg[hi]
        return torch.exp(mix).view(1, -1, 1, 1)


def gained_params(mu: torch.Tensor, sigma: torch.Tensor, gain: torch.Tensor) -> DistributionParams:
    """Laplace closure under scaling: y*g ~ Laplace(mu*g, sigma*g)."""
    return DistributionParams(mu=mu * gain, sigma=lower_bound(sigma * gain, SIGMA_MIN))


def make_latent(values: torch.Tensor, kind: str, quantized: bool = False) -> LatentGrid:
    if values.dim() == 4:
        if values.shape[0] != 1:
            raise ValueError("LatentGrid carries a single frame; got batch > 1")
        values = values[0]
    return LatentGrid(values=values, kind=kind, quantized=quantized)
