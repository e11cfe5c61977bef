"""Full machine-oriented video codec: assembly of the coding loop, semantic
decoder, fusion, and entropy constraints, plus the real bitstream paths.

encode_clip and decode_clip share one frame-decode routine operating on
quantized latents, so the encoder-side reconstruction is bit-exactly the
stream decoder's output by construction.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from . import bitstream
from .backbones import backbone_channels
from .basecodec import (
    ContextBuilder,
    ContextPrior,
    ContextPyramid,
    ContextualEncoder,
    FactorizedMotionPrior,
    FeatureBuffer,
    MotionCoder,
    PixelDecoder,
    PixelDecodeOutput,
    QualityGains,
    gained_params,
    zero_buffer,
)
from .biec import BiecAligner
from .config import ModelConfig
from .core import Clip, Frame, PadRecord, crop_from_grid, pad_to_grid
from .entropy import (
    LatentGrid,
    quantize_tensor,
    range_decode,
    range_encode,
    rate_estimate,
    round_half_away,
)
from .fusion import SPDFusion
from .motion import FlowEstimator, warp
from .semantic import SemanticDecoder, SemanticTapSet

CHECKPOINT_VERSION = 1


@dataclass
class FrameForward:
    """Differentiable per-frame training outputs."""

    x: torch.Tensor
    x_m: torch.Tensor
    x_bar: torch.Tensor
    x_hat: torch.Tensor
    f_pixel: torch.Tensor
    taps: SemanticTapSet
    alpha: torch.Tensor | None
    rate_mv_bits: torch.Tensor   # estimated bits for the whole frame
    rate_ctx_bits: torch.Tensor

    def bpp(self) -> torch.Tensor:
        _, _, h, w = self.x.shape
        return (self.rate_mv_bits + self.rate_ctx_bits) / (h * w * self.x.shape[0])


class MachineVideoCodec(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.flow_net = FlowEstimator(levels=cfg.flow_levels, hidden=cfg.flow_hidden)
        self.motion_coder = MotionCoder(cfg)
        self.motion_prior = FactorizedMotionPrior(cfg.ch_motion_latent)
        self.gain_mv = QualityGains(cfg.num_qualities, cfg.ch_motion_latent)
        self.context_builder = ContextBuilder(cfg)
        self.ctx_encoder = ContextualEncoder(cfg)
        self.pixel_decoder = PixelDecoder(cfg)
        self.ctx_prior = ContextPrior(cfg)
        self.gain_ctx = QualityGains(cfg.num_qualities, cfg.ch_latent)
        self.semantic_decoder = SemanticDecoder(cfg)
        self.fusion = SPDFusion(cfg)
        self.aligner = BiecAligner(cfg, backbone_channels(cfg.backbone))

    # ---------------------------------------------------------------- groups

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Table-style module tags: M = motion path, C = contextual coding
        and pixel decode, S = machine-oriented reconstruction."""
        groups = {
            "M": [self.flow_net, self.motion_coder, self.motion_prior, self.gain_mv],
            "C": [self.context_builder, self.ctx_encoder, self.pixel_decoder,
                  self.ctx_prior, self.gain_ctx],
            "S": [self.semantic_decoder, self.fusion, self.aligner],
        }
        return {k: [p for m in mods for p in m.parameters()] for k, mods in groups.items()}

    # ------------------------------------------------------------- primitives

    def motion_estimate(self, x: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
        if x.shape != ref.shape:
            raise ValueError("frame/reference dims differ")
        return self.flow_net(x, ref)

    def motion_compensate(self, buffer: FeatureBuffer, flow: torch.Tensor) -> ContextPyramid:
        return self.context_builder(buffer, flow)

    def contextual_encode(self, x: torch.Tensor, ctx: ContextPyramid) -> torch.Tensor:
        return self.ctx_encoder(x, ctx)

    def pixel_decode(self, y_ctx_hat: LatentGrid, ctx: ContextPyramid,
                     x_m: torch.Tensor, training: bool = False) -> PixelDecodeOutput:
        if not y_ctx_hat.quantized and not training:
            raise ValueError("pixel_decode outside training requires a quantized latent")
        f_pixel, x_bar = self.pixel_decoder(y_ctx_hat.values.unsqueeze(0), ctx)
        return PixelDecodeOutput(f_pixel=f_pixel, x_bar=x_bar, x_m=x_m.clamp(0.0, 1.0))

    def quality_position(self, lambda_mse: float, lam_min: float, lam_max: float) -> float:
        """Map a sampled distortion weight onto the continuous gain axis."""
        if lam_max <= lam_min:
            return float(self.cfg.num_qualities - 1)
        t = (math.log(lambda_mse) - math.log(lam_min)) / (math.log(lam_max) - math.log(lam_min))
        return max(0.0, min(1.0, t)) * (self.cfg.num_qualities - 1)

    # ------------------------------------------------------------ train path

    def forward_gop(
        self,
        frames: torch.Tensor,
        quality_pos: float,
        qmode: str = "noise",
        generator: torch.Generator | None = None,
    ) -> list[FrameForward]:
        """Run the full coding loop over (T, B, 3, H, W) frames with the
        graph retained across P-frames.  Frame 0 is intra (zero reference)."""
        if frames.dim() != 5:
            raise ValueError("expected (T, B, 3, H, W) frames")
        t_len, b, _, h, w = frames.shape
        if h % 16 or w % 16:
            raise ValueError("frame dims must be multiples of 16 for the latent grid")
        g_mv = self.gain_mv.interpolate(quality_pos)
        g_ctx = self.gain_ctx.interpolate(quality_pos)

        outputs: list[FrameForward] = []
        buffer = zero_buffer(b, h, w, self.cfg.ch_full, device=frames.device, dtype=frames.dtype)
        for t in range(t_len):
            x = frames[t]
            flow = self.flow_net(x, buffer.pixels)
            y_mv = self.motion_coder.encode(flow)
            mu_mv, sigma_mv = self.motion_prior(y_mv)
            params_mv = gained_params(mu_mv, sigma_mv, g_mv)
            y_mv_code = quantize_tensor(y_mv * g_mv, qmode, generator)
            rate_mv = rate_estimate(y_mv_code, params_mv)
            flow_hat = self.motion_coder.decode(y_mv_code / g_mv)

            x_m = warp(buffer.pixels, flow_hat)
            ctx = self.context_builder(buffer, flow_hat)
            y_ctx = self.ctx_encoder(x, ctx)
            mu_c, sigma_c = self.ctx_prior(ctx.c3)
            params_ctx = gained_params(mu_c, sigma_c, g_ctx)
            y_ctx_code = quantize_tensor(y_ctx * g_ctx, qmode, generator)
            rate_ctx = rate_estimate(y_ctx_code, params_ctx)
            y_ctx_hat = y_ctx_code / g_ctx

            f_pixel, x_bar = self.pixel_decoder(y_ctx_hat, ctx)
            taps = self.semantic_decoder(y_ctx_hat, ctx.c2, ctx.c3)
            fusion_out = self.fusion(taps.f_mvs_full, f_pixel, ctx.c1)

            outputs.append(FrameForward(
                x=x, x_m=x_m.clamp(0.0, 1.0), x_bar=x_bar, x_hat=fusion_out.x_hat,
                f_pixel=f_pixel, taps=taps, alpha=fusion_out.alpha,
                rate_mv_bits=rate_mv, rate_ctx_bits=rate_ctx,
            ))
            buffer = FeatureBuffer(pixels=x_bar, features=f_pixel)
        return outputs

    # ----------------------------------------------------------- stream path

    def _code_frame(
        self,
        x: torch.Tensor | None,
        buffer: FeatureBuffer,
        quality: int,
        payloads: tuple[bytes, bytes] | None = None,
    ) -> tuple[dict, FeatureBuffer]:
        """Shared per-frame stream routine.

        Encoder mode (x given): quantize latents, entropy-code, then decode
        from the coded symbols.  Decoder mode (payloads given): entropy-decode
        and run the identical reconstruction ops on identical inputs.
        """
        g_mv = self.gain_mv.gain(quality)
        g_ctx = self.gain_ctx.gain(quality)
        b, _, h, w = buffer.pixels.shape

        mv_like = torch.zeros(
            b, self.cfg.ch_motion_latent, h // 16, w // 16,
            device=buffer.pixels.device, dtype=buffer.pixels.dtype,
        )
        mu_mv, sigma_mv = self.motion_prior(mv_like)
        params_mv = gained_params(mu_mv, sigma_mv, g_mv)

        if x is not None:
            flow = self.flow_net(x, buffer.pixels)
            y_mv = self.motion_coder.encode(flow)
            s_mv = round_half_away(y_mv * g_mv)
            mv_chunk = range_encode(s_mv, params_mv)
            mv_payload = mv_chunk.payload
        else:
            s_mv = torch.from_numpy(
                range_decode(payloads[0], params_mv)
            ).to(buffer.pixels.dtype)
            mv_payload = payloads[0]

        flow_hat = self.motion_coder.decode(s_mv / g_mv)
        x_m = warp(buffer.pixels, flow_hat)
        ctx = self.context_builder(buffer, flow_hat)
        mu_c, sigma_c = self.ctx_prior(ctx.c3)
        params_ctx = gained_params(mu_c, sigma_c, g_ctx)

        if x is not None:
            y_ctx = self.ctx_encoder(x, ctx)
            s_ctx = round_half_away(y_ctx * g_ctx)
            ctx_chunk = range_encode(s_ctx, params_ctx)
            ctx_payload = ctx_chunk.payload
        else:
            s_ctx = torch.from_numpy(
                range_decode(payloads[1], params_ctx)
            ).to(buffer.pixels.dtype)
            ctx_payload = payloads[1]

        y_ctx_hat = s_ctx / g_ctx
        f_pixel, x_bar = self.pixel_decoder(y_ctx_hat, ctx)
        taps = self.semantic_decoder(y_ctx_hat, ctx.c2, ctx.c3)
        fusion_out = self.fusion(taps.f_mvs_full, f_pixel, ctx.c1)

        frame_data = {
            "mv_payload": mv_payload,
            "ctx_payload": ctx_payload,
            "x_hat": fusion_out.x_hat,
            "x_bar": x_bar,
            "x_m": x_m.clamp(0.0, 1.0),
            "taps": taps,
            "alpha": fusion_out.alpha,
        }
        return frame_data, FeatureBuffer(pixels=x_bar, features=f_pixel)

    @torch.no_grad()
    def encode_clip(
        self, clip: Clip, quality: int, gop_size: int | None = None,
    ) -> tuple[bytes, list[torch.Tensor]]:
        """Encode to a SECV container; also returns the reconstructions the
        stream decoder will produce (same code path, same inputs)."""
        self.eval()
        if not clip.frames:
            raise ValueError("cannot encode an empty clip")
        gop = gop_size or clip.gop_size
        height, width = clip.frames[0].pixels.shape[-2:]
        header = bitstream.StreamHeader(
            width=width, height=height, gop_size=gop, quality_index=quality,
        )

        records: list[bitstream.FrameRecord] = []
        recons: list[torch.Tensor] = []
        buffer: FeatureBuffer | None = None
        pad: PadRecord | None = None
        for i, frame in enumerate(clip.frames):
            padded, pad = pad_to_grid(frame)
            x = padded.pixels.unsqueeze(0)
            intra = (i % gop) == 0
            if intra or buffer is None:
                buffer = zero_buffer(1, x.shape[-2], x.shape[-1], self.cfg.ch_full)
            data, buffer = self._code_frame(x, buffer, quality)
            records.append(bitstream.FrameRecord(
                intra=intra, mv_payload=data["mv_payload"], ctx_payload=data["ctx_payload"],
            ))
            recons.append(crop_from_grid(
                Frame(pixels=data["x_hat"][0], timestamp_index=i), pad,
            ).pixels)
        return bitstream.pack_stream(header, records), recons

    @torch.no_grad()
    def decode_clip(self, data: bytes) -> tuple[list[torch.Tensor], bitstream.StreamHeader]:
        self.eval()
        header, records = bitstream.unpack_stream(data)
        padded_h = -(-header.height // 64) * 64
        padded_w = -(-header.width // 64) * 64
        pad = PadRecord(pad_bottom=padded_h - header.height, pad_right=padded_w - header.width)

        frames: list[torch.Tensor] = []
        buffer: FeatureBuffer | None = None
        for i, rec in enumerate(records):
            if rec.intra or buffer is None:
                buffer = zero_buffer(1, padded_h, padded_w, self.cfg.ch_full)
            data_i, buffer = self._code_frame(
                None, buffer, header.quality_index,
                payloads=(rec.mv_payload, rec.ctx_payload),
            )
            frames.append(crop_from_grid(
                Frame(pixels=data_i["x_hat"][0], timestamp_index=i), pad,
            ).pixels)
        return frames, header

    @torch.no_grad()
    def single_image_taps(self, image: torch.Tensor, quality: int | None = None) -> SemanticTapSet:
        """Semantic taps for one image coded against the zero reference."""
        self.eval()
        q = quality if quality is not None else self.cfg.num_qualities - 1
        if image.dim() == 3:
            image = image.unsqueeze(0)
        padded, _ = pad_to_grid(Frame(pixels=image[0], timestamp_index=0))
        x = padded.pixels.unsqueeze(0)
        buffer = zero_buffer(1, x.shape[-2], x.shape[-1], self.cfg.ch_full)
        data, _ = self._code_frame(x, buffer, q)
        return data["taps"]


# ------------------------------------------------------------- checkpointing

def save_checkpoint(model: MachineVideoCodec, path: str | Path,
                    stage_history: list[str] | None = None,
                    extra: dict | None = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_config": dataclasses.asdict(model.cfg),
        "state_dict": model.state_dict(),
        "stage_history": list(stage_history or []),
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path, override: dict | None = None) -> tuple[MachineVideoCodec, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    cfg_dict = dict(payload["model_config"])
    if override:
        cfg_dict.update(override)
    for k in ("biec_directions", "biec_scales"):
        if isinstance(cfg_dict.get(k), list):
            cfg_dict[k] = tuple(cfg_dict[k])
    cfg = ModelConfig(**cfg_dict)
    model = MachineVideoCodec(cfg)
    model.load_state_dict(payload["state_dict"], strict=True)
    meta = {"stage_history": payload.get("stage_history", []), "extra": payload.get("extra", {})}
    return model, meta
