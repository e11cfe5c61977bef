"""Rate-task evaluation: quality sweeps over the real bitstream, BD-rate
against a configurable anchor, the ablation registry (M1-M11 plus the
entropy-weight sweep), feature-tap export, and small analysis helpers.

bpp is always measured from container bytes, never from rate estimates, and
every sweep cross-checks the stream decoder against the encoder-side
reconstruction bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from PIL import Image
from scipy.interpolate import PchipInterpolator

from .backbones import extract_pyramid
from .biec import FeaturePyramidPair
from .config import ModelConfig, RunConfig
from .core import Frame, RatePoint, frame_to_uint8
from .data import ClipDataset, make_probe_image
from .model import MachineVideoCodec, load_checkpoint
from .proxy_task import SegHead, proxy_task_eval
from .training import BASE_STAGE_NAMES, VCM_STAGE_NAMES, run_plan


class EvalError(RuntimeError):
    pass


class StreamMismatchError(EvalError):
    """Stream-path reconstruction differs from the direct encoder-side one."""


# ----------------------------------------------------------------- curves

@dataclass(frozen=True)
class RateTaskCurve:
    codec_id: str
    task_id: str
    points: tuple[RatePoint, ...]

    def __post_init__(self) -> None:
        if len(self.points) < 4:
            raise ValueError("a rate-task curve needs at least 4 points for the cubic fit")
        bpps = [p.bpp for p in self.points]
        if any(b2 <= b1 for b1, b2 in zip(bpps, bpps[1:])):
            raise ValueError("curve points must have strictly increasing bpp")

    def to_dict(self) -> dict:
        return {
            "codec_id": self.codec_id,
            "task_id": self.task_id,
            "points": [
                {"bpp": p.bpp, "metric_name": p.metric_name, "metric_value": p.metric_value}
                for p in self.points
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RateTaskCurve":
        return cls(
            codec_id=d["codec_id"],
            task_id=d["task_id"],
            points=tuple(RatePoint(**p) for p in d["points"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "RateTaskCurve":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class BDRateResult:
    percent: float
    anchor_id: str
    test_id: str
    overlap_interval: tuple[float, float]
    valid: bool = True
    reason: str = ""


def _metric_rate_axes(curve: RateTaskCurve) -> tuple[np.ndarray, np.ndarray] | None:
    pts = sorted(curve.points, key=lambda p: p.metric_value)
    metric = np.array([p.metric_value for p in pts], dtype=np.float64)
    bpp = np.array([p.bpp for p in pts], dtype=np.float64)
    if np.any(bpp <= 0) or np.any(np.diff(metric) <= 0):
        return None
    return metric, np.log10(bpp)


def bd_rate(anchor: RateTaskCurve, test: RateTaskCurve) -> BDRateResult:
    """Average bitrate difference (percent) at equal task metric: monotone
    piecewise-cubic fit of log10(rate) vs metric, integrated over the shared
    metric interval.  Negative means the test codec saves bits."""
    a = _metric_rate_axes(anchor)
    t = _metric_rate_axes(test)
    if a is None or t is None:
        return BDRateResult(
            percent=float("nan"), anchor_id=anchor.codec_id, test_id=test.codec_id,
            overlap_interval=(0.0, 0.0), valid=False,
            reason="curve not usable: needs positive rates and strictly monotone metric",
        )
    lo = max(a[0][0], t[0][0])
    hi = min(a[0][-1], t[0][-1])
    if hi <= lo:
        return BDRateResult(
            percent=float("nan"), anchor_id=anchor.codec_id, test_id=test.codec_id,
            overlap_interval=(lo, hi), valid=False, reason="no metric overlap",
        )
    fit_a = PchipInterpolator(a[0], a[1])
    fit_t = PchipInterpolator(t[0], t[1])
    int_a = fit_a.antiderivative()(hi) - fit_a.antiderivative()(lo)
    int_t = fit_t.antiderivative()(hi) - fit_t.antiderivative()(lo)
    avg_log_diff = (int_t - int_a) / (hi - lo)
    percent = (10.0 ** avg_log_diff - 1.0) * 100.0
    return BDRateResult(
        percent=float(percent), anchor_id=anchor.codec_id, test_id=test.codec_id,
        overlap_interval=(float(lo), float(hi)),
    )


# ------------------------------------------------------------------ sweeps

@torch.no_grad()
def sweep_rate_points(
    model: MachineVideoCodec,
    dataset: ClipDataset,
    head: SegHead,
    qualities: tuple[int, ...],
    gop_size: int,
    num_clips: int,
    codec_id: str = "semcodec",
) -> RateTaskCurve:
    """One rate point per quality index, measured end to end through the
    container: encode, decode, verify bit-exactness, count real bytes."""
    if len(qualities) < 4:
        raise ValueError("a sweep needs at least 4 quality indices")
    points = []
    for q in sorted(qualities):
        total_bits = 0
        total_pixels = 0
        recon_frames: list[torch.Tensor] = []
        masks: list[torch.Tensor] = []
        for i in range(num_clips):
            labeled = dataset.labeled(i)
            stream, direct = model.encode_clip(labeled.clip, q, gop_size)
            decoded, header = model.decode_clip(stream)
            for k, (da, db) in enumerate(zip(direct, decoded)):
                if not torch.equal(da, db):
                    raise StreamMismatchError(
                        f"clip {i} frame {k} at quality {q}: stream reconstruction "
                        "differs from the direct-path reconstruction"
                    )
            total_bits += len(stream) * 8
            total_pixels += len(decoded) * header.height * header.width
            recon_frames.extend(decoded)
            masks.append(labeled.masks)
        bpp = total_bits / total_pixels
        miou = proxy_task_eval(head, torch.stack(recon_frames), torch.cat(masks))
        points.append(RatePoint(bpp=bpp, metric_name="mean_iou", metric_value=miou))
    points.sort(key=lambda p: p.bpp)
    return RateTaskCurve(codec_id=codec_id, task_id="moving_shapes_seg", points=tuple(points))


@torch.no_grad()
def measure_feature_mse(
    model: MachineVideoCodec,
    dataset: ClipDataset,
    cfg: RunConfig,
    quality: int,
    num_clips: int,
    gop_size: int,
) -> tuple[float, float]:
    """(mean backbone-feature MSE between x and x_hat over the guidance
    pyramid, mean bpp) on eval clips — the machine-perception distortion."""
    mse_terms: list[float] = []
    total_bits = 0
    total_pixels = 0
    for i in range(num_clips):
        labeled = dataset.labeled(i)
        stream, recons = model.encode_clip(labeled.clip, quality, gop_size)
        total_bits += len(stream) * 8
        total_pixels += len(recons) * labeled.clip.frames[0].pixels.shape[-2] * \
            labeled.clip.frames[0].pixels.shape[-1]
        x = torch.stack([f.pixels for f in labeled.clip.frames])
        x_hat = torch.stack(recons)
        ref = extract_pyramid(cfg.model.backbone, x, cfg.model.backbone_pretrained)
        rec = extract_pyramid(cfg.model.backbone, x_hat, cfg.model.backbone_pretrained)
        per_scale = [
            torch.nn.functional.mse_loss(rec.features[s], ref.features[s]).item()
            for s in (4, 8, 16)
        ]
        mse_terms.append(sum(per_scale) / len(per_scale))
    return float(np.mean(mse_terms)), total_bits / total_pixels


@torch.no_grad()
def measure_conditional_entropy(
    model: MachineVideoCodec,
    cfg: RunConfig,
    dataset: ClipDataset,
    num_clips: int,
    gop_size: int,
) -> float:
    """Mean of the per-scale, per-direction conditional-entropy terms on eval
    clips (deterministic rounding path)."""
    model.eval()
    totals: dict[str, float] = {}
    n = 0
    for i in range(num_clips):
        clip = dataset.labeled(i).clip
        frames = torch.stack([f.pixels for f in clip.frames]).unsqueeze(1)
        outputs = model.forward_gop(frames[:gop_size], float(model.cfg.num_qualities - 1),
                                    qmode="round")
        for o in outputs:
            pyr = extract_pyramid(cfg.model.backbone, o.x, cfg.model.backbone_pretrained)
            pair = FeaturePyramidPair(
                mvs={s: o.taps.by_scale()[s] for s in cfg.model.biec_scales},
                vb={s: pyr.features[s] for s in cfg.model.biec_scales},
            )
            _, report = model.aligner.biec_loss(pair)
            for k, v in report.items():
                totals[k] = totals.get(k, 0.0) + v
            n += 1
    if not totals or n == 0:
        raise EvalError("no conditional-entropy terms produced (alignment disabled?)")
    return sum(totals.values()) / (len(totals) * n)


# --------------------------------------------------------------- ablations

def _patch_model(**kw) -> Callable[[ModelConfig], ModelConfig]:
    def apply(cfg: ModelConfig) -> ModelConfig:
        return dataclasses.replace(cfg, **kw)
    return apply


ABLATIONS: dict[str, tuple[str, Callable[[ModelConfig], ModelConfig]]] = {
    "M0": ("full model: bi-directional entropy constraint at three scales, gated fusion",
           _patch_model()),
    "M1": ("decoder-side conditional entropy only (drop H of backbone given decoder)",
           _patch_model(biec_directions=("mvs_given_vb",))),
    "M2": ("backbone-side conditional entropy only (drop H of decoder given backbone)",
           _patch_model(biec_directions=("vb_given_mvs",))),
    "M3": ("both directions, single 1/16 scale",
           _patch_model(biec_scales=(16,))),
    "M4": ("decoder-side direction only, single 1/16 scale",
           _patch_model(biec_scales=(16,), biec_directions=("mvs_given_vb",))),
    "M5": ("backbone-side direction only, single 1/16 scale",
           _patch_model(biec_scales=(16,), biec_directions=("vb_given_mvs",))),
    "M6": ("entropy constraint replaced by element-wise MSE alignment",
           _patch_model(alignment="mse")),
    "M7": ("entropy constraint replaced by channel-wise KL alignment",
           _patch_model(alignment="kl_channel")),
    "M8": ("entropy constraint replaced by spatial KL alignment",
           _patch_model(alignment="kl_spatial")),
    "M9": ("gating removed: fuse semantic and pixel paths by concatenation",
           _patch_model(fusion_mode="concat")),
    "M10": ("gating removed: fuse semantic and pixel paths by addition",
            _patch_model(fusion_mode="add")),
    "M11": ("pixel path removed: reconstruction from the semantic path alone",
            _patch_model(fusion_mode="semantic_only")),
    "NOBIEC": ("alignment loss disabled entirely (consistency-only VCM training)",
               _patch_model(alignment="none")),
}

LAMBDA_E_GRID: tuple[float, ...] = (0.1, 0.5, 1.0, 5.0, 10.0)


def apply_ablation(cfg: RunConfig, variant: str) -> RunConfig:
    if variant not in ABLATIONS:
        raise KeyError(
            f"unknown ablation variant {variant!r}; registered: {sorted(ABLATIONS)}"
        )
    _, patch = ABLATIONS[variant]
    out = dataclasses.replace(cfg, model=patch(cfg.model))
    out.model.validate()
    return out


def transfer_matching_weights(model: MachineVideoCodec, state: dict) -> tuple[int, int]:
    """Copy every state entry whose name and shape match; returns
    (copied, skipped).  Used to seed ablation variants from a shared
    base-stage checkpoint whose alignment heads differ."""
    own = model.state_dict()
    copied = {k: v for k, v in state.items() if k in own and own[k].shape == v.shape}
    own.update(copied)
    model.load_state_dict(own)
    return len(copied), len(state) - len(copied)


def train_base_checkpoint(cfg: RunConfig, scale_factor: float | None = None) -> Path:
    """Train only the pixel-codec stages; the resulting checkpoint seeds every
    ablation variant so their coding loops start identical."""
    bcfg = dataclasses.replace(
        cfg,
        training=dataclasses.replace(
            cfg.training, out_dir=str(Path(cfg.training.out_dir) / "base"),
        ),
    )
    torch.manual_seed(bcfg.seed)
    model = MachineVideoCodec(bcfg.model)
    return run_plan(model, bcfg, scale_factor, stage_names=BASE_STAGE_NAMES)


def run_ablation(
    variant: str,
    cfg: RunConfig,
    head: SegHead,
    scale_factor: float | None = None,
    base_checkpoint: str | Path | None = None,
    out_dir: str | Path | None = None,
) -> dict:
    """Train one registered variant's VCM stages (from a shared base
    checkpoint when given, else from scratch through the base stages too),
    sweep its rate-task curve, and write a metrics bundle."""
    vcfg = apply_ablation(cfg, variant)
    out = Path(out_dir or Path(cfg.training.out_dir) / f"ablation_{variant}")
    vcfg = dataclasses.replace(
        vcfg, training=dataclasses.replace(vcfg.training, out_dir=str(out)),
    )
    torch.manual_seed(vcfg.seed)
    model = MachineVideoCodec(vcfg.model)
    stage_names = None
    if base_checkpoint is not None:
        payload = torch.load(base_checkpoint, map_location="cpu", weights_only=False)
        transfer_matching_weights(model, payload["state_dict"])
        stage_names = VCM_STAGE_NAMES
    final = run_plan(model, vcfg, scale_factor, stage_names=stage_names)

    dataset = ClipDataset(vcfg.data, base_seed=vcfg.seed + 7)
    curve = sweep_rate_points(
        model, dataset, head,
        qualities=vcfg.eval.qualities, gop_size=vcfg.eval.gop_size,
        num_clips=vcfg.eval.num_clips, codec_id=variant,
    )
    h_mean: float | None = None
    if vcfg.model.alignment == "biec":
        h_mean = measure_conditional_entropy(
            model, vcfg, dataset, num_clips=min(2, vcfg.eval.num_clips),
            gop_size=vcfg.eval.gop_size,
        )
    bundle = {
        "variant": variant,
        "description": ABLATIONS[variant][0],
        "checkpoint": str(final),
        "metrics_csv": str(out / "metrics.csv"),
        "curve": curve.to_dict(),
        "h_mean": h_mean,
    }
    (out / "result.json").write_text(json.dumps(bundle, indent=2), encoding="utf-8")
    return bundle


def lambda_e_sweep(
    cfg: RunConfig,
    base_checkpoint: str | Path,
    scale_factor: float | None = None,
    grid: tuple[float, ...] = LAMBDA_E_GRID,
    out_dir: str | Path | None = None,
) -> list[dict]:
    """Retrain the VCM stages at each entropy-loss weight and record the
    converged mean conditional entropy."""
    out = Path(out_dir or Path(cfg.training.out_dir) / "lambda_e_sweep")
    payload = torch.load(base_checkpoint, map_location="cpu", weights_only=False)
    rows: list[dict] = []
    for lam_e in grid:
        run_dir = out / f"lambda_e_{lam_e:g}"
        run_cfg = dataclasses.replace(
            cfg,
            weights=dataclasses.replace(cfg.weights, lambda_e=lam_e),
            training=dataclasses.replace(cfg.training, out_dir=str(run_dir)),
        )
        torch.manual_seed(run_cfg.seed)
        model = MachineVideoCodec(run_cfg.model)
        transfer_matching_weights(model, payload["state_dict"])
        run_plan(model, run_cfg, scale_factor, stage_names=VCM_STAGE_NAMES)
        dataset = ClipDataset(run_cfg.data, base_seed=run_cfg.seed + 7)
        h = measure_conditional_entropy(
            model, run_cfg, dataset, num_clips=min(2, run_cfg.eval.num_clips),
            gop_size=run_cfg.eval.gop_size,
        )
        rows.append({"lambda_e": lam_e, "h_mean": h})
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.json").write_text(json.dumps(rows, indent=2), encoding="utf-8")
    return rows


# ------------------------------------------------------------- tap export

def write_probe_set(out_dir: str | Path, per_class: int = 3, size: int = 64,
                    seed: int = 0) -> list[Path]:
    """Materialize labeled probe images named class{k}_{i}.png."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k in range(1, 4):  # shape classes; class 0 is background
        for i in range(per_class):
            img, _ = make_probe_image(
                seed * 1000 + k * 100 + i, class_id=k, height=size, width=size,
            )
            p = out / f"class{k}_{i}.png"
            Image.fromarray(frame_to_uint8(Frame(img))).save(p)
            paths.append(p)
    return sorted(paths)


def _probe_class(stem: str) -> int:
    if stem.startswith("class"):
        head = stem[5:].split("_", 1)[0]
        if head.isdigit():
            return int(head)
    return -1


@torch.no_grad()
def export_feature_taps(
    checkpoint: str | Path,
    probes_dir: str | Path,
    out_path: str | Path,
    quality: int | None = None,
) -> Path:
    """Code each probe image against the zero reference and archive its
    1/8-scale semantic tap; the class id rides in the entry name.  One archive
    entry per probe; the checkpoint is never written."""
    model, _ = load_checkpoint(checkpoint)
    model.eval()
    probe_paths = sorted(Path(probes_dir).glob("*.png"))
    if not probe_paths:
        raise EvalError(f"no .png probes found in {probes_dir}")
    arrays: dict[str, np.ndarray] = {}
    for p in probe_paths:
        arr = np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0
        img = torch.from_numpy(np.transpose(arr, (2, 0, 1)))
        taps = model.single_image_taps(img, quality=quality)
        key = f"{p.stem}.class{_probe_class(p.stem)}"
        arrays[key] = taps.tap_1_8.squeeze(0).numpy()
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez(out, **arrays)
    return out


@torch.no_grad()
def pooled_tap_features(model: MachineVideoCodec, images: torch.Tensor,
                        quality: int | None = None) -> np.ndarray:
    """Spatially averaged 1/8-scale taps, one row per image — the projection
    input for class-separability checks."""
    rows = []
    for i in range(images.shape[0]):
        taps = model.single_image_taps(images[i], quality=quality)
        rows.append(taps.tap_1_8.mean(dim=(0, 2, 3)).numpy())
    return np.stack(rows)


def silhouette_score(features: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette over samples (euclidean), classic (b - a)/max(a, b)."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("silhouette needs at least two classes")
    dists = np.linalg.norm(features[:, None, :] - features[None, :, :], axis=-1)
    scores = []
    for i in range(len(features)):
        same = (labels == labels[i])
        n_same = same.sum() - 1
        if n_same == 0:
            scores.append(0.0)
            continue
        a = dists[i][same].sum() / n_same
        b = min(dists[i][labels == c].mean() for c in classes if c != labels[i])
        scores.append((b - a) / max(a, b) if max(a, b) > 0 else 0.0)
    return float(np.mean(scores))


def plot_curves(curves: list[RateTaskCurve], path: str | Path,
                size: tuple[int, int] = (640, 480)) -> Path:
    """Minimal dependency-free rate-task plot: one polyline per curve on
    shared axes, legend in the top-left corner."""
    from PIL import ImageDraw

    if not curves:
        raise ValueError("nothing to plot")
    w, h = size
    margin = 56
    img = Image.new("RGB", size, (255, 255, 255))
    draw = ImageDraw.Draw(img)
    xs = [p.bpp for c in curves for p in c.points]
    ys = [p.metric_value for c in curves for p in c.points]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    xr = (x1 - x0) or 1.0
    yr = (y1 - y0) or 1.0

    def to_px(bpp: float, metric: float) -> tuple[float, float]:
        px = margin + (bpp - x0) / xr * (w - 2 * margin)
        py = h - margin - (metric - y0) / yr * (h - 2 * margin)
        return px, py

    draw.line([(margin, h - margin), (w - margin, h - margin)], fill=(0, 0, 0))
    draw.line([(margin, margin), (margin, h - margin)], fill=(0, 0, 0))
    draw.text((w // 2 - 10, h - margin + 18), "bpp", fill=(0, 0, 0))
    draw.text((4, margin - 24), curves[0].points[0].metric_name, fill=(0, 0, 0))
    palette = [(200, 40, 40), (40, 90, 200), (30, 150, 60), (150, 60, 170),
               (220, 140, 20), (20, 160, 160)]
    for ci, curve in enumerate(curves):
        color = palette[ci % len(palette)]
        pts = [to_px(p.bpp, p.metric_value) for p in curve.points]
        draw.line(pts, fill=color, width=2)
        for px, py in pts:
            draw.ellipse([px - 3, py - 3, px + 3, py + 3], fill=color)
        draw.text((margin + 8, margin + 4 + 14 * ci), curve.codec_id, fill=color)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    img.save(out)
    return out


@torch.no_grad()
def save_alpha_heatmaps(
    model: MachineVideoCodec,
    dataset: ClipDataset,
    out_dir: str | Path,
    quality: int | None = None,
    clip_index: int = 0,
) -> list[Path]:
    """Channel-averaged fusion-gate maps for one clip, as grayscale PNGs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    clip = dataset.labeled(clip_index).clip
    frames = torch.stack([f.pixels for f in clip.frames]).unsqueeze(1)
    q = quality if quality is not None else model.cfg.num_qualities - 1
    outputs = model.forward_gop(frames, float(q), qmode="round")
    paths = []
    for t, o in enumerate(outputs):
        if o.alpha is None:
            continue
        amap = o.alpha.mean(dim=1)[0].clamp(0, 1).numpy()
        img = (amap * 255.0).round().astype(np.uint8)
        p = out / f"alpha_{t:03d}.png"
        Image.fromarray(img).save(p)
        paths.append(p)
    return paths
