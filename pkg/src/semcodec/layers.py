"""Small conv building blocks shared by the codec networks.

Codec-style plumbing: plain convolutions with LeakyReLU, no normalization in
the coding path, bottleneck residual blocks, nearest-neighbor upsampling
followed by a 3x3 conv (avoids checkerboard artifacts).
"""

from __future__ import annotations

import torch
from torch import nn


def conv3x3(in_ch: int, out_ch: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1)


def conv1x1(in_ch: int, out_ch: int) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel_size=1)


class BottleneckResBlock(nn.Module):
    """1x1 reduce -> 3x3 -> 1x1 expand with a residual connection."""

    def __init__(self, channels: int, mid_channels: int | None = None):
        super().__init__()
        mid = mid_channels or max(channels // 2, 8)
        self.body = nn.Sequential(
            conv1x1(channels, mid),
            nn.LeakyReLU(0.1, inplace=True),
            conv3x3(mid, mid),
            nn.LeakyReLU(0.1, inplace=True),
            conv1x1(mid, channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


class UpsampleConv(nn.Module):
    """Nearest-neighbor 2x upsampling followed by a 3x3 conv."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = conv3x3(in_ch, out_ch)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
        return self.conv(x)


class DownConv(nn.Module):
    """Strided 3x3 conv halving the spatial dims."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = conv3x3(in_ch, out_ch, stride=2)
        self.act = nn.LeakyReLU(0.1, inplace=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.conv(x))


class UNet(nn.Module):
    """3-level U-Net with skip connections.

    in_ch -> base at full res, 2*base at 1/2, 4*base at 1/4, back up to out_ch.
    """

    def __init__(self, in_ch: int, out_ch: int, base: int):
        super().__init__()
        act = nn.LeakyReLU(0.1, inplace=True)
        self.enc0 = nn.Sequential(conv3x3(in_ch, base), act, conv3x3(base, base), act)
        self.enc1 = nn.Sequential(conv3x3(base, 2 * base, stride=2), act, conv3x3(2 * base, 2 * base), act)
        self.enc2 = nn.Sequential(conv3x3(2 * base, 4 * base, stride=2), act, conv3x3(4 * base, 4 * base), act)
        self.up1 = UpsampleConv(4 * base, 2 * base)
        self.dec1 = nn.Sequential(conv3x3(4 * base, 2 * base), act)
        self.up0 = UpsampleConv(2 * base, base)
        self.dec0 = nn.Sequential(conv3x3(2 * base, base), act, conv3x3(base, out_ch))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        e0 = self.enc0(x)
        e1 = self.enc1(e0)
        e2 = self.enc2(e1)
        d1 = self.dec1(torch.cat([self.up1(e2), e1], dim=1))
        d0 = self.dec0(torch.cat([self.up0(d1), e0], dim=1))
        return d0
