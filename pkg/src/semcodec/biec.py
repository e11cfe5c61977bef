"""Bi-directional entropy constraints between semantic-decoder taps and
guidance-backbone features.

Six DE modules (3 scales x 2 directions) each map the conditioning feature
to element-wise Laplace parameters for the feature on the other side of the
boundary.  Conditional entropies use the same unit-bin Laplace probability
as the coding engine, normalized per element so the loss weight is
resolution-independent.  Backbone features are always gradient-stopped.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .backbones import BackbonePyramid
from .config import ModelConfig
from .entropy import DistributionParams, laplace_bin_prob, scale_from_raw
from .layers import BottleneckResBlock, conv1x1, conv3x3
from .semantic import SemanticTapSet, tap_channels

DIRECTIONS = ("mvs_given_vb", "vb_given_mvs")


@dataclass(frozen=True)
class FeaturePyramidPair:
    """Semantic taps and guidance features, spatially aligned per scale."""

    mvs: dict[int, torch.Tensor]
    vb: dict[int, torch.Tensor]

    def __post_init__(self) -> None:
        if set(self.mvs) != set(self.vb):
            raise ValueError("mvs/vb scale sets differ")
        for s in self.mvs:
            if self.mvs[s].shape[-2:] != self.vb[s].shape[-2:]:
                raise ValueError(f"spatial dims differ at scale 1/{s}")

    @classmethod
    def from_outputs(cls, taps: SemanticTapSet, pyramid: BackbonePyramid,
                     scales: tuple[int, ...] = (4, 8, 16)) -> "FeaturePyramidPair":
        tap_map = taps.by_scale()
        return cls(
            mvs={s: tap_map[s] for s in scales},
            vb={s: pyramid.features[s] for s in scales},
        )


class DEModule(nn.Module):
    """Density estimator: conditioning feature -> (mu, sigma) of the target."""

    def __init__(self, cond_channels: int, target_channels: int, hidden: int):
        super().__init__()
        self.cond_channels = cond_channels
        self.body = nn.Sequential(
            conv3x3(cond_channels, hidden),
            nn.LeakyReLU(0.1, inplace=True),
            BottleneckResBlock(hidden),
        )
        self.mu_head = conv1x1(hidden, target_channels)
        self.sigma_head = conv1x1(hidden, target_channels)

    def forward(self, cond: torch.Tensor) -> DistributionParams:
        if cond.shape[1] != self.cond_channels:
            raise ValueError(
                f"conditioning feature has {cond.shape[1]} channels, expected {self.cond_channels}"
            )
        h = self.body(cond)
        return DistributionParams(mu=self.mu_head(h), sigma=scale_from_raw(self.sigma_head(h)))


def conditional_entropy(target: torch.Tensor, params: DistributionParams) -> torch.Tensor:
    """Sum over elements of -log2 p(target | mu, sigma), unit-bin Laplace."""
    if target.shape != params.mu.shape:
        raise ValueError("target/params shape mismatch")
    p = laplace_bin_prob(target, params.mu, params.sigma)
    return -torch.log2(p).sum()


class BiecAligner(nn.Module):
    """Holds the DE modules plus the 1x1 adapters used by the MSE/KL
    alignment ablations; computes biec_loss and alignment_variant_loss."""

    def __init__(self, cfg: ModelConfig, vb_channels: dict[int, int]):
        super().__init__()
        self.scales = tuple(cfg.biec_scales)
        self.directions = tuple(cfg.biec_directions)
        mvs_ch = tap_channels(cfg)
        self.de = nn.ModuleDict()
        for s in self.scales:
            self.de[f"mvs_given_vb@{s}"] = DEModule(vb_channels[s], mvs_ch[s], cfg.de_hidden)
            self.de[f"vb_given_mvs@{s}"] = DEModule(mvs_ch[s], vb_channels[s], cfg.de_hidden)
        # channel adapters for the direct/distribution alignment variants
        self.adapters = nn.ModuleDict(
            {str(s): conv1x1(mvs_ch[s], vb_channels[s]) for s in self.scales}
        )

    def biec_loss(self, pair: FeaturePyramidPair) -> tuple[torch.Tensor, dict[str, float]]:
        """L_e = sum over active scales/directions of per-element conditional
        entropy; the report always carries each term under its metric key."""
        report: dict[str, float] = {}
        some = next(iter(pair.mvs.values()))
        total = some.new_zeros(())
        for s in self.scales:
            f_mvs = pair.mvs[s]
            f_vb = pair.vb[s].detach()
            for direction in self.directions:
                de = self.de[f"{direction}@{s}"]
                if direction == "mvs_given_vb":
                    params = de(f_vb)
                    h = conditional_entropy(f_mvs, params) / f_mvs.numel()
                    report[f"H_mvs_given_vb@{s}"] = float(h.detach())
                else:
                    params = de(f_mvs)
                    h = conditional_entropy(f_vb, params) / f_vb.numel()
                    report[f"H_vb_given_mvs@{s}"] = float(h.detach())
                total = total + h
        return total, report

    def alignment_variant_loss(self, pair: FeaturePyramidPair, kind: str) -> tuple[torch.Tensor, dict[str, float]]:
        if kind == "biec":
            return self.biec_loss(pair)
        if kind == "none":
            some = next(iter(pair.mvs.values()))
            return some.new_zeros(()), {}
        if kind not in ("mse", "kl_channel", "kl_spatial"):
            raise ValueError(f"unknown alignment kind {kind!r}")
        report: dict[str, float] = {}
        some = next(iter(pair.mvs.values()))
        total = some.new_zeros(())
        for s in self.scales:
            adapted = self.adapters[str(s)](pair.mvs[s])
            target = pair.vb[s].detach()
            if kind == "mse":
                term = nn.functional.mse_loss(adapted, target)
            elif kind == "kl_channel":
                log_q = torch.log_softmax(adapted, dim=1)
                log_p = torch.log_softmax(target, dim=1)
                term = (log_p.exp() * (log_p - log_q)).sum(dim=1).mean()
            else:  # kl_spatial
                b, c, h, w = adapted.shape
                log_q = torch.log_softmax(adapted.reshape(b, c, h * w), dim=-1)
                log_p = torch.log_softmax(target.reshape(b, c, h * w), dim=-1)
                term = (log_p.exp() * (log_p - log_q)).sum(dim=-1).mean()
            report[f"align_{kind}@{s}"] = float(term.detach())
            total = total + term
        return total, report
