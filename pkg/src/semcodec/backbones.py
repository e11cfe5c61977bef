"""Pluggable guidance backbones, feature-consistency losses, and the
perceptual distance used by the rate-distortion loss.

All guidance models are frozen: parameters never receive gradients, but the
losses stay differentiable with respect to the reconstructed frames.  Native
strides that differ from the nominal {1/4, 1/8, 1/16} grid are bilinearly
resized onto it so downstream shape contracts hold for every backbone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
from torch import nn

from .config import ConsistencyEntryConfig

NOMINAL_SCALES = (4, 8, 16)
_TOY_SEED = 20240501


@dataclass(frozen=True)
class BackbonePyramid:
    features: dict[int, torch.Tensor]  # keyed by scale denominator
    backbone_id: str

    def __post_init__(self) -> None:
        if tuple(sorted(self.features)) != NOMINAL_SCALES:
            raise ValueError(f"pyramid must carry scales {NOMINAL_SCALES}")
        for s, t in self.features.items():
            if not torch.isfinite(t).all():
                raise ValueError(f"non-finite guidance feature at 1/{s}")


class GuidanceBackbone(nn.Module):
    """Base wrapper: hierarchical features + named shallow layers."""

    backbone_id: str = "base"
    pyramid_channels: dict[int, int] = {}
    shallow_layers: tuple[str, ...] = ()

    def features_by_scale(self, x: torch.Tensor) -> dict[int, torch.Tensor]:
        raise NotImplementedError

    def layer_features(self, x: torch.Tensor, layer_ids: tuple[str, ...]) -> dict[str, torch.Tensor]:
        raise NotImplementedError

    def freeze(self) -> "GuidanceBackbone":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self


def _resize_to(x: torch.Tensor, dims: tuple[int, int]) -> torch.Tensor:
    if x.shape[-2:] == dims:
        return x
    return nn.functional.interpolate(x, size=dims, mode="bilinear", align_corners=False)


def _seeded_init(module: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif p.dim() > 1:
                p.copy_(0.2 * torch.randn(p.shape, generator=gen))
            else:
                # 1-d non-bias params are normalization gains: keep them live
                p.copy_(1.0 + 0.1 * torch.randn(p.shape, generator=gen))


class ToyBackbone(GuidanceBackbone):
    """Small fixed-seed hierarchical CNN; weights are random but frozen and
    identical across runs, so it behaves like a (meaningless) pretrained
    model for contract and trend tests."""

    backbone_id = "toy"
    pyramid_channels = {4: 32, 8: 48, 16: 64}
    shallow_layers = ("stem", "s4")

    def __init__(self, pretrained: bool = False):
        super().__init__()
        act = nn.GELU()

        def block(cin: int, cout: int) -> nn.Sequential:
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=2, padding=1),
                nn.GroupNorm(4, cout), act,
                nn.Conv2d(cout, cout, 3, padding=1),
                nn.GroupNorm(4, cout), act,
            )

        self.stem = block(3, 16)        # 1/2
        self.stage4 = block(16, 32)     # 1/4
        self.stage8 = block(32, 48)     # 1/8
        self.stage16 = block(48, 64)    # 1/16
        _seeded_init(self, _TOY_SEED)
        self.freeze()

    def _run(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        s2 = self.stem(x)
        s4 = self.stage4(s2)
        s8 = self.stage8(s4)
        s16 = self.stage16(s8)
        return {"stem": s2, "s4": s4, "s8": s8, "s16": s16}

    def features_by_scale(self, x: torch.Tensor) -> dict[int, torch.Tensor]:
        f = self._run(x)
        return {4: f["s4"], 8: f["s8"], 16: f["s16"]}

    def layer_features(self, x: torch.Tensor, layer_ids: tuple[str, ...]) -> dict[str, torch.Tensor]:
        f = self._run(x)
        return {lid: f[lid] for lid in layer_ids}


class ResNetBackbone(GuidanceBackbone):
    backbone_id = "resnet18"
    pyramid_channels = {4: 128, 8: 256, 16: 512}
    shallow_layers = ("conv1", "layer1")

    def __init__(self, pretrained: bool = False):
        super().__init__()
        from torchvision.models import resnet18, ResNet18_Weights

        weights = ResNet18_Weights.DEFAULT if pretrained else None
        self.net = resnet18(weights=weights)
        self.freeze()

    def _stages(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        n = self.net
        h = n.relu(n.bn1(n.conv1(x)))
        c1 = h
        h = n.maxpool(h)
        l1 = n.layer1(h)
        l2 = n.layer2(l1)
        l3 = n.layer3(l2)
        l4 = n.layer4(l3)
        return {"conv1": c1, "layer1": l1, "layer2": l2, "layer3": l3, "layer4": l4}

    def features_by_scale(self, x: torch.Tensor) -> dict[int, torch.Tensor]:
        h, w = x.shape[-2:]
        st = self._stages(x)
        # stages 2/3/4 sit at native 1/8, 1/16, 1/32; resize to nominal grid
        return {
            4: _resize_to(st["layer2"], (h // 4, w // 4)),
            8: _resize_to(st["layer3"], (h // 8, w // 8)),
            16: _resize_to(st["layer4"], (h // 16, w // 16)),
        }

    def layer_features(self, x: torch.Tensor, layer_ids: tuple[str, ...]) -> dict[str, torch.Tensor]:
        st = self._stages(x)
        return {lid: st[lid] for lid in layer_ids}


class SwinBackbone(GuidanceBackbone):
    backbone_id = "swin_t"
    pyramid_channels = {4: 192, 8: 384, 16: 768}
    shallow_layers = ("patch", "stage1")

    def __init__(self, pretrained: bool = False):
        super().__init__()
        from torchvision.models import swin_t, Swin_T_Weights

        weights = Swin_T_Weights.DEFAULT if pretrained else None
        self.net = swin_t(weights=weights)
        self.freeze()

    def _stages(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        # torchvision swin features: [patch_embed, stage1, down, stage2,
        # down, stage3, down, stage4]; activations are NHWC
        taps = {1: "patch", 3: "stage2", 5: "stage3", 7: "stage4"}
        out: dict[str, torch.Tensor] = {}
        h = x
        for i, layer in enumerate(self.net.features):
            h = layer(h)
            if i in taps:
                out[taps[i]] = h.permute(0, 3, 1, 2).contiguous()
            if i == 1:
                out["stage1"] = h.permute(0, 3, 1, 2).contiguous()
        return out

    def features_by_scale(self, x: torch.Tensor) -> dict[int, torch.Tensor]:
        h, w = x.shape[-2:]
        st = self._stages(x)
        # stages 2/3/4 sit at native 1/8, 1/16, 1/32; resize to nominal grid
        return {
            4: _resize_to(st["stage2"], (h // 4, w // 4)),
            8: _resize_to(st["stage3"], (h // 8, w // 8)),
            16: _resize_to(st["stage4"], (h // 16, w // 16)),
        }

    def layer_features(self, x: torch.Tensor, layer_ids: tuple[str, ...]) -> dict[str, torch.Tensor]:
        st = self._stages(x)
        return {lid: st[lid] for lid in layer_ids}


_BACKBONES: dict[str, Callable[[bool], GuidanceBackbone]] = {
    "toy": ToyBackbone,
    "resnet18": ResNetBackbone,
    "swin_t": SwinBackbone,
}
_CACHE: dict[tuple[str, bool], GuidanceBackbone] = {}


def backbone_channels(backbone_id: str) -> dict[int, int]:
    if backbone_id not in _BACKBONES:
        raise KeyError(f"unknown backbone {backbone_id!r}; registered: {sorted(_BACKBONES)}")
    return dict(_BACKBONES[backbone_id].pyramid_channels)


def get_backbone(backbone_id: str, pretrained: bool = False) -> GuidanceBackbone:
    if backbone_id not in _BACKBONES:
        raise KeyError(f"unknown backbone {backbone_id!r}; registered: {sorted(_BACKBONES)}")
    key = (backbone_id, pretrained)
    if key not in _CACHE:
        _CACHE[key] = _BACKBONES[backbone_id](pretrained)
    return _CACHE[key]


def extract_pyramid(backbone_id: str, x: torch.Tensor, pretrained: bool = False) -> BackbonePyramid:
    """Frozen, gradient-free hierarchical features at {1/4, 1/8, 1/16}."""
    bb = get_backbone(backbone_id, pretrained)
    with torch.no_grad():
        feats = bb.features_by_scale(x)
    return BackbonePyramid(features=feats, backbone_id=backbone_id)


def pyramid_with_grad(backbone_id: str, x: torch.Tensor, pretrained: bool = False) -> dict[int, torch.Tensor]:
    """Same features but differentiable w.r.t. x (weights stay frozen)."""
    return get_backbone(backbone_id, pretrained).features_by_scale(x)


class ToyFlowModel(nn.Module):
    """Fixed-seed frozen flow net standing in for a pretrained estimator."""

    def __init__(self):
        super().__init__()
        act = nn.GELU()
        self.net = nn.Sequential(
            nn.Conv2d(6, 24, 3, padding=1), nn.GroupNorm(4, 24), act,
            nn.Conv2d(24, 24, 3, padding=1, dilation=1), nn.GroupNorm(4, 24), act,
            nn.Conv2d(24, 2, 3, padding=1),
        )
        _seeded_init(self, _TOY_SEED + 1)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([a, b], dim=1))


_FLOW_MODELS: dict[str, Callable[[], nn.Module]] = {"toy_flow": ToyFlowModel}
_FLOW_CACHE: dict[str, nn.Module] = {}


def get_flow_model(flow_id: str) -> nn.Module:
    if flow_id not in _FLOW_MODELS:
        raise KeyError(f"unknown flow model {flow_id!r}")
    if flow_id not in _FLOW_CACHE:
        _FLOW_CACHE[flow_id] = _FLOW_MODELS[flow_id]()
    return _FLOW_CACHE[flow_id]


def validate_consistency_spec(entries: tuple[ConsistencyEntryConfig, ...]) -> None:
    if not entries:
        raise ValueError("consistency loss enabled with empty model list")
    for e in entries:
        if e.weight < 0:
            raise ValueError("consistency weights must be >= 0")
        if e.model not in _BACKBONES:
            raise KeyError(f"unknown backbone {e.model!r}; registered: {sorted(_BACKBONES)}")
        allowed = set(_BACKBONES[e.model].shallow_layers)
        for lid in e.layers:
            if lid not in allowed:
                raise ValueError(
                    f"layer {lid!r} is not in {e.model!r}'s shallow set {sorted(allowed)}"
                )


def consistency_loss(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    entries: tuple[ConsistencyEntryConfig, ...],
    pretrained: bool = False,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Sum over models i and their shallow layers j of
    weight_i * MSE(layer_ij(x), layer_ij(x_hat)).  Gradients flow only
    through x_hat."""
    if x.shape != x_hat.shape:
        raise ValueError("frame shape mismatch")
    validate_consistency_spec(entries)
    total = x_hat.new_zeros(())
    components: dict[str, float] = {}
    for e in entries:
        bb = get_backbone(e.model, pretrained)
        with torch.no_grad():
            ref = bb.layer_features(x, tuple(e.layers))
        rec = bb.layer_features(x_hat, tuple(e.layers))
        for lid in e.layers:
            term = e.weight * nn.functional.mse_loss(rec[lid], ref[lid])
            total = total + term
            components[f"cons_{e.model}.{lid}"] = float(term.detach())
    return total, components


def temporal_consistency_loss(
    x_seq: torch.Tensor,
    x_hat_seq: torch.Tensor,
    flow_model_id: str = "toy_flow",
    downsample: int = 2,
) -> torch.Tensor:
    """MSE between flows of consecutive original vs reconstructed frames,
    computed on bilinearly downsampled inputs."""
    if x_seq.shape != x_hat_seq.shape:
        raise ValueError("sequence shape mismatch")
    if x_seq.shape[0] < 2:
        raise ValueError("temporal consistency needs at least two frames")
    fm = get_flow_model(flow_model_id)

    def down(t: torch.Tensor) -> torch.Tensor:
        return nn.functional.interpolate(
            t, scale_factor=1.0 / downsample, mode="bilinear", align_corners=False
        )

    total = x_hat_seq.new_zeros(())
    n = x_seq.shape[0] - 1
    for t in range(n):
        with torch.no_grad():
            f_ref = fm(down(x_seq[t:t + 1]), down(x_seq[t + 1:t + 2]))
        f_rec = fm(down(x_hat_seq[t:t + 1]), down(x_hat_seq[t + 1:t + 2]))
        total = total + nn.functional.mse_loss(f_rec, f_ref)
    return total / n


def perceptual_distance(x: torch.Tensor, x_hat: torch.Tensor, kind: str = "auto") -> torch.Tensor:
    """LPIPS when the package is importable, else a shallow-feature distance
    on the toy backbone (same call signature, same zero-at-identity)."""
    if kind == "auto":
        try:
            import lpips  # noqa: F401
            kind = "lpips"
        except ImportError:
            kind = "toy"
    if kind == "lpips":
        import lpips

        net = _FLOW_CACHE.get("__lpips__")
        if net is None:
            net = lpips.LPIPS(net="vgg").eval()
            _FLOW_CACHE["__lpips__"] = net
        return net(2 * x - 1, 2 * x_hat - 1).mean()
    if kind == "toy":
        bb = get_backbone("toy")
        with torch.no_grad():
            ref = bb.layer_features(x, bb.shallow_layers)
        rec = bb.layer_features(x_hat, bb.shallow_layers)
        terms = [nn.functional.mse_loss(rec[k], ref[k]) for k in bb.shallow_layers]
        return torch.stack(terms).mean()
    raise ValueError(f"unknown perceptual metric kind {kind!r}")
