"""HTTP facade over the codec: encode/decode round-trips, clip validation,
BD-rate computation, and stage-plan introspection.

Frames travel as base64 PNGs; streams travel as base64 containers.  Long-
running work (training, ablation sweeps) stays in the CLI — those are batch
jobs, not request/response calls.
"""

from __future__ import annotations

import base64
import io
from pathlib import Path

import numpy as np
import torch
from fastapi import FastAPI, HTTPException
from PIL import Image
from pydantic import BaseModel, Field

from . import __version__
from .bitstream import BitstreamError
from .config import RunConfig
from .core import Clip, Frame, frame_to_uint8, validate_clip
from .evalkit import RateTaskCurve, bd_rate
from .model import MachineVideoCodec, load_checkpoint
from .training import build_stage_plan


class HealthResponse(BaseModel):
    status: str
    version: str
    checkpoint_loaded: bool


class PointModel(BaseModel):
    bpp: float = Field(ge=0)
    metric_name: str
    metric_value: float


class CurveModel(BaseModel):
    codec_id: str
    task_id: str
    points: list[PointModel] = Field(min_length=4)

    def to_curve(self) -> RateTaskCurve:
        from .core import RatePoint

        return RateTaskCurve(
            codec_id=self.codec_id,
            task_id=self.task_id,
            points=tuple(RatePoint(**p.model_dump()) for p in self.points),
        )


class BdrateRequest(BaseModel):
    anchor: CurveModel
    test: CurveModel


class BdrateResponse(BaseModel):
    percent: float | None
    anchor_id: str
    test_id: str
    overlap_low: float
    overlap_high: float
    valid: bool
    reason: str


class ValidateRequest(BaseModel):
    frames_b64: list[str] = Field(min_length=1)
    gop_size: int = Field(default=6, ge=1)


class ValidateResponse(BaseModel):
    ok: bool
    issues: list[str]
    num_frames: int
    width: int
    height: int


class EncodeRequest(BaseModel):
    frames_b64: list[str] = Field(min_length=1)
    quality: int = Field(ge=0)
    gop_size: int = Field(default=6, ge=1)


class EncodeResponse(BaseModel):
    stream_b64: str
    bpp: float
    num_frames: int
    width: int
    height: int


class DecodeRequest(BaseModel):
    stream_b64: str


class DecodeResponse(BaseModel):
    frames_b64: list[str]
    width: int
    height: int
    gop_size: int
    quality_index: int


class StageRow(BaseModel):
    name: str
    modules: list[str]
    recipe: str
    lr: float
    lr_end: float | None
    gop: int
    epochs: int
    steps: int


class StagePlanResponse(BaseModel):
    scale_factor: float
    rows: list[StageRow]


def _png_to_frame(b64: str, index: int) -> Frame:
    try:
        raw = base64.b64decode(b64, validate=True)
        img = Image.open(io.BytesIO(raw)).convert("RGB")
    except Exception as exc:
        raise HTTPException(status_code=422, detail=f"frame {index}: invalid PNG data ({exc})")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return Frame(torch.from_numpy(arr.transpose(2, 0, 1)), timestamp_index=index)


def _frame_to_png_b64(pixels: torch.Tensor) -> str:
    arr = frame_to_uint8(Frame(pixels))
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def create_app(checkpoint: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="semcodec", version=__version__)
    state: dict = {"model": None}
    if checkpoint is not None:
        model, _ = load_checkpoint(checkpoint)
        model.eval()
        state["model"] = model

    def require_model() -> MachineVideoCodec:
        if state["model"] is None:
            raise HTTPException(status_code=503, detail="no checkpoint loaded")
        return state["model"]

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(
            status="ok", version=__version__, checkpoint_loaded=state["model"] is not None,
        )

    @app.post("/validate", response_model=ValidateResponse)
    def validate(req: ValidateRequest) -> ValidateResponse:
        frames = [_png_to_frame(b, i) for i, b in enumerate(req.frames_b64)]
        clip = Clip(frames, gop_size=req.gop_size)
        report = validate_clip(clip)
        h, w = frames[0].pixels.shape[-2:]
        return ValidateResponse(
            ok=report.ok, issues=list(report.violations),
            num_frames=len(frames), width=w, height=h,
        )

    @app.post("/encode", response_model=EncodeResponse)
    def encode(req: EncodeRequest) -> EncodeResponse:
        model = require_model()
        if req.quality >= model.cfg.num_qualities:
            raise HTTPException(
                status_code=422,
                detail=f"quality must be < {model.cfg.num_qualities}",
            )
        frames = [_png_to_frame(b, i) for i, b in enumerate(req.frames_b64)]
        clip = Clip(frames, gop_size=req.gop_size)
        stream, _ = model.encode_clip(clip, req.quality, req.gop_size)
        h, w = frames[0].pixels.shape[-2:]
        return EncodeResponse(
            stream_b64=base64.b64encode(stream).decode("ascii"),
            bpp=len(stream) * 8 / (len(frames) * h * w),
            num_frames=len(frames), width=w, height=h,
        )

    @app.post("/decode", response_model=DecodeResponse)
    def decode(req: DecodeRequest) -> DecodeResponse:
        model = require_model()
        try:
            stream = base64.b64decode(req.stream_b64, validate=True)
        except Exception as exc:
            raise HTTPException(status_code=422, detail=f"invalid base64 stream ({exc})")
        try:
            frames, header = model.decode_clip(stream)
        except BitstreamError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return DecodeResponse(
            frames_b64=[_frame_to_png_b64(f) for f in frames],
            width=header.width, height=header.height,
            gop_size=header.gop_size, quality_index=header.quality_index,
        )

    @app.post("/bdrate", response_model=BdrateResponse)
    def bdrate(req: BdrateRequest) -> BdrateResponse:
        try:
            result = bd_rate(req.anchor.to_curve(), req.test.to_curve())
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return BdrateResponse(
            percent=None if not result.valid else result.percent,
            anchor_id=result.anchor_id, test_id=result.test_id,
            overlap_low=result.overlap_interval[0],
            overlap_high=result.overlap_interval[1],
            valid=result.valid, reason=result.reason,
        )

    @app.get("/stage-plan", response_model=StagePlanResponse)
    def stage_plan(scale: float = 1.0) -> StagePlanResponse:
        try:
            plan = build_stage_plan(RunConfig(), scale_factor=scale)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return StagePlanResponse(
            scale_factor=scale,
            rows=[
                StageRow(
                    name=s.name, modules=sorted(s.modules), recipe=s.recipe,
                    lr=s.lr, lr_end=s.lr_end, gop=s.gop, epochs=s.epochs, steps=s.steps,
                )
                for s in plan.stages
            ],
        )

    return app
