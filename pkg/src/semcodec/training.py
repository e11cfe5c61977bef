"""Loss composition and the staged training schedule.

The 12-row plan (7 base rows, 5 VCM rows) is reproduced structurally at any
scale factor; only per-stage step budgets shrink.  Within a GOP the graph is
retained across P-frames, distortion weights are resampled per step from the
configured range, and the perceptual/consistency weights follow the sampled
value (tie rule).  Rate terms always enter with unit weight.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbones import (
    consistency_loss,
    extract_pyramid,
    perceptual_distance,
    temporal_consistency_loss,
)
from .biec import FeaturePyramidPair
from .config import RunConfig, WeightsConfig
from .data import ClipDataset
from .model import FrameForward, MachineVideoCodec, save_checkpoint

MODULE_TAGS = ("M", "C", "S")

# (name, modules, recipe, lr, lr_end, gop, epochs) — the 12-row schedule
TABLE_ROWS: tuple[tuple, ...] = (
    ("base1", ("M",), "motion_mse", 1e-4, None, 2, 1),
    ("base2", ("C",), "context_mse", 1e-4, None, 2, 1),
    ("base3", ("C",), "context_mse", 1e-4, None, 3, 1),
    ("base4", ("C",), "context_mse", 1e-4, None, 6, 1),
    ("base5", ("M",), "motion_rd", 1e-4, None, 6, 8),
    ("base6", ("C",), "context_rd", 1e-4, None, 6, 8),
    ("base7", ("M", "C"), "base", 1e-4, 1e-5, 6, 20),
    ("vcm1", ("S",), "align", 1e-4, None, 2, 1),
    ("vcm2", ("S",), "align", 1e-4, None, 3, 1),
    ("vcm3", ("S",), "align", 1e-4, None, 6, 1),
    ("vcm4", ("S",), "align", 1e-4, 1e-5, 6, 5),
    ("vcm5", ("M", "C", "S"), "total", 1e-5, None, 6, 2),
)

BASE_STAGE_NAMES = tuple(r[0] for r in TABLE_ROWS[:7])
VCM_STAGE_NAMES = tuple(r[0] for r in TABLE_ROWS[7:])


class TrainingDiverged(RuntimeError):
    def __init__(self, stage: str, step: int, checkpoint: str | None):
        super().__init__(
            f"non-finite loss in stage {stage} at step {step}; "
            f"last good checkpoint: {checkpoint or 'none saved'}"
        )
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class LossWeights:
    lambda_mse: float
    lambda_lpips: float
    lambda_e: float
    lambda_cons: float

    def __post_init__(self) -> None:
        for name in ("lambda_mse", "lambda_lpips", "lambda_e", "lambda_cons"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def sample(cls, rng: np.random.Generator, wcfg: WeightsConfig) -> "LossWeights":
        lam = math.exp(rng.uniform(math.log(wcfg.lambda_mse_min), math.log(wcfg.lambda_mse_max)))
        return cls(
            lambda_mse=lam,
            lambda_lpips=lam if wcfg.lambda_lpips_tied else wcfg.lambda_lpips,
            lambda_e=wcfg.lambda_e,
            lambda_cons=lam if wcfg.lambda_cons_tied else wcfg.lambda_cons,
        )


@dataclass
class LossReport:
    total: torch.Tensor
    components: dict[str, float]   # raw, unweighted term values
    weighted: dict[str, float]     # term contributions to the total
    bpp: float = 0.0

    def check(self) -> "LossReport":
        if not torch.isfinite(self.total):
            bad = [k for k, v in self.weighted.items() if not math.isfinite(v)]
            raise FloatingPointError(f"non-finite loss component(s): {bad or ['total']}")
        return self


def _mean_mse(outputs: list[FrameForward], attr: str) -> torch.Tensor:
    terms = [nn.functional.mse_loss(getattr(o, attr), o.x) for o in outputs]
    return torch.stack(terms).mean()


def _mean_rate(outputs: list[FrameForward], attr: str) -> torch.Tensor:
    terms = []
    for o in outputs:
        b, _, h, w = o.x.shape
        terms.append(getattr(o, attr) / (b * h * w))
    return torch.stack(terms).mean()


def base_loss(
    x: torch.Tensor,
    x_bar: torch.Tensor,
    rate_m_bpp: torch.Tensor,
    rate_c_bpp: torch.Tensor,
    weights: LossWeights,
    perceptual_kind: str = "auto",
) -> LossReport:
    """lambda_MSE*MSE + lambda_LPIPS*perceptual + R_m + R_c (rates in bpp)."""
    if float(rate_m_bpp.detach()) < 0 or float(rate_c_bpp.detach()) < 0:
        raise ValueError("negative rate term")
    d_mse = nn.functional.mse_loss(x_bar, x)
    d_percep = perceptual_distance(x, x_bar, kind=perceptual_kind)
    total = weights.lambda_mse * d_mse + weights.lambda_lpips * d_percep + rate_m_bpp + rate_c_bpp
    weighted = {
        "D_mse": float(weights.lambda_mse * d_mse.detach()),
        "D_lpips": float(weights.lambda_lpips * d_percep.detach()),
        "R_m": float(rate_m_bpp.detach()),
        "R_c": float(rate_c_bpp.detach()),
    }
    components = {
        "D_mse": float(d_mse.detach()),
        "D_lpips": float(d_percep.detach()),
        "R_m": float(rate_m_bpp.detach()),
        "R_c": float(rate_c_bpp.detach()),
    }
    return LossReport(
        total=total, components=components, weighted=weighted,
        bpp=float((rate_m_bpp + rate_c_bpp).detach()),
    ).check()


def total_loss(base: LossReport, l_e: torch.Tensor, l_cons: torch.Tensor,
               weights: LossWeights) -> LossReport:
    """L_total = L_base + lambda_e * L_e + lambda_cons * L_cons."""
    total = base.total + weights.lambda_e * l_e + weights.lambda_cons * l_cons
    components = dict(base.components)
    components["L_e"] = float(l_e.detach())
    components["L_cons"] = float(l_cons.detach())
    weighted = dict(base.weighted)
    weighted["L_e"] = float(weights.lambda_e * l_e.detach())
    weighted["L_cons"] = float(weights.lambda_cons * l_cons.detach())
    return LossReport(total=total, components=components, weighted=weighted, bpp=base.bpp).check()


@dataclass(frozen=True)
class StageSpec:
    name: str
    modules: frozenset[str]
    recipe: str
    lr: float
    lr_end: float | None
    gop: int
    epochs: int
    steps: int

    def __post_init__(self) -> None:
        if not self.modules or not self.modules.issubset(set(MODULE_TAGS)):
            raise ValueError(f"invalid module set {set(self.modules)}")
        if self.gop < 2:
            raise ValueError("gop length must be >= 2")
        if self.steps < 1:
            raise ValueError("stage must run at least one step")


@dataclass(frozen=True)
class StagePlan:
    stages: tuple[StageSpec, ...]

    def names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.stages)


def build_stage_plan(cfg: RunConfig, scale_factor: float | None = None) -> StagePlan:
    scale = cfg.training.stage_scale if scale_factor is None else scale_factor
    if not (0 < scale <= 1):
        raise ValueError("scale_factor must lie in (0, 1]")
    stages = []
    for name, modules, recipe, lr, lr_end, gop, epochs in TABLE_ROWS:
        steps = max(1, round(epochs * cfg.training.steps_per_epoch * scale))
        stages.append(StageSpec(
            name=name, modules=frozenset(modules), recipe=recipe,
            lr=lr, lr_end=lr_end, gop=gop, epochs=epochs, steps=steps,
        ))
    return StagePlan(stages=tuple(stages))


# ------------------------------------------------------------------- recipes

def _gop_losses(outputs: list[FrameForward], cfg: RunConfig, weights: LossWeights,
                model: MachineVideoCodec, need_base: bool, need_align: bool,
                ) -> tuple[LossReport | None, torch.Tensor, torch.Tensor, dict[str, float]]:
    """Shared pieces: base rate-distortion report, L_e, L_cons for one GOP."""
    base_rep: LossReport | None = None
    if need_base:
        x_all = torch.cat([o.x for o in outputs])
        xbar_all = torch.cat([o.x_bar for o in outputs])
        base_rep = base_loss(
            x_all, xbar_all,
            _mean_rate(outputs, "rate_mv_bits"),
            _mean_rate(outputs, "rate_ctx_bits"),
            weights,
        )
    l_e = outputs[0].x.new_zeros(())
    l_cons = outputs[0].x.new_zeros(())
    extra: dict[str, float] = {}
    if need_align:
        if cfg.model.alignment != "none":
            for o in outputs:
                pyr = extract_pyramid(cfg.model.backbone, o.x, cfg.model.backbone_pretrained)
                pair = FeaturePyramidPair(
                    mvs={s: o.taps.by_scale()[s] for s in cfg.model.biec_scales},
                    vb={s: pyr.features[s] for s in cfg.model.biec_scales},
                )
                term, rep = model.aligner.alignment_variant_loss(pair, cfg.model.alignment)
                l_e = l_e + term / len(outputs)
                for k, v in rep.items():
                    extra[k] = extra.get(k, 0.0) + v / len(outputs)
        x_seq = torch.cat([o.x for o in outputs])
        xhat_seq = torch.cat([o.x_hat for o in outputs])
        cons, cons_rep = consistency_loss(
            x_seq, xhat_seq, cfg.weights.consistency, cfg.model.backbone_pretrained,
        )
        l_cons = cons
        extra.update(cons_rep)
        if cfg.weights.flow_model and cfg.weights.temporal_weight > 0 and len(outputs) >= 2:
            batch = outputs[0].x.shape[0]
            temp = outputs[0].x.new_zeros(())
            for b in range(batch):
                temp = temp + temporal_consistency_loss(
                    torch.stack([o.x[b] for o in outputs]),
                    torch.stack([o.x_hat[b] for o in outputs]),
                    cfg.weights.flow_model,
                    cfg.weights.flow_downsample,
                ) / batch
            l_cons = l_cons + cfg.weights.temporal_weight * temp
            extra["cons_temporal"] = float(temp.detach())
    return base_rep, l_e, l_cons, extra


def recipe_loss(recipe: str, outputs: list[FrameForward], weights: LossWeights,
                cfg: RunConfig, model: MachineVideoCodec) -> LossReport:
    if recipe == "motion_mse":
        d = _mean_mse(outputs, "x_m")
        return LossReport(d, {"D_mse_xm": float(d.detach())}, {"D_mse_xm": float(d.detach())}).check()
    if recipe == "context_mse":
        d = _mean_mse(outputs, "x_bar")
        return LossReport(d, {"D_mse_xbar": float(d.detach())}, {"D_mse_xbar": float(d.detach())}).check()
    if recipe == "motion_rd":
        d = _mean_mse(outputs, "x_m")
        r = _mean_rate(outputs, "rate_mv_bits")
        total = weights.lambda_mse * d + r
        return LossReport(
            total,
            {"D_mse_xm": float(d.detach()), "R_m": float(r.detach())},
            {"D_mse_xm": float(weights.lambda_mse * d.detach()), "R_m": float(r.detach())},
            bpp=float(r.detach()),
        ).check()
    if recipe == "context_rd":
        d = _mean_mse(outputs, "x_bar")
        r = _mean_rate(outputs, "rate_ctx_bits")
        total = weights.lambda_mse * d + r
        return LossReport(
            total,
            {"D_mse_xbar": float(d.detach()), "R_c": float(r.detach())},
            {"D_mse_xbar": float(weights.lambda_mse * d.detach()), "R_c": float(r.detach())},
            bpp=float(r.detach()),
        ).check()
    if recipe == "base":
        rep, _, _, _ = _gop_losses(outputs, cfg, weights, model, need_base=True, need_align=False)
        return rep
    if recipe == "align":
        _, l_e, l_cons, extra = _gop_losses(outputs, cfg, weights, model, need_base=False, need_align=True)
        total = weights.lambda_e * l_e + weights.lambda_cons * l_cons
        rep = LossReport(
            total,
            {"L_e": float(l_e.detach()), "L_cons": float(l_cons.detach()), **extra},
            {"L_e": float(weights.lambda_e * l_e.detach()),
             "L_cons": float(weights.lambda_cons * l_cons.detach())},
        )
        return rep.check()
    if recipe == "total":
        base_rep, l_e, l_cons, extra = _gop_losses(outputs, cfg, weights, model, need_base=True, need_align=True)
        rep = total_loss(base_rep, l_e, l_cons, weights)
        rep.components.update(extra)
        return rep
    raise ValueError(f"unknown loss recipe {recipe!r}")


# ------------------------------------------------------------------ trainer

_CSV_FIELDS = [
    "step", "stage", "recipe", "lr", "lambda_mse", "total", "bpp",
    "D_mse", "D_lpips", "R_m", "R_c", "L_e", "L_cons",
    "D_mse_xm", "D_mse_xbar",
    "H_mvs_given_vb@4", "H_vb_given_mvs@4",
    "H_mvs_given_vb@8", "H_vb_given_mvs@8",
    "H_mvs_given_vb@16", "H_vb_given_mvs@16",
]


class MetricsWriter:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._new = not self.path.exists()

    def write(self, row: dict) -> None:
        with open(self.path, "a", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=_CSV_FIELDS, extrasaction="ignore")
            if self._new:
                w.writeheader()
                self._new = False
            w.writerow(row)


def snapshot_params(model: nn.Module, tags: frozenset[str]) -> dict[str, torch.Tensor]:
    """Clone every parameter OUTSIDE the given module tags (freeze contract)."""
    groups = model.parameter_groups()
    active = {id(p) for tag in tags for p in groups[tag]}
    return {
        name: p.detach().clone()
        for name, p in model.named_parameters()
        if id(p) not in active
    }


def verify_frozen(model: nn.Module, snapshot: dict[str, torch.Tensor]) -> None:
    for name, ref in snapshot.items():
        cur = dict(model.named_parameters())[name]
        if not torch.equal(cur, ref):
            raise AssertionError(f"frozen parameter {name} changed during stage")


def run_stage(
    model: MachineVideoCodec,
    stage: StageSpec,
    dataset: ClipDataset,
    cfg: RunConfig,
    seed: int,
    metrics: MetricsWriter | None = None,
    global_step0: int = 0,
) -> int:
    """Train one stage; returns the next global step.  Freeze contract and
    NaN abort are enforced here."""
    rng = np.random.default_rng(seed)
    noise_gen = torch.Generator().manual_seed(seed)
    groups = model.parameter_groups()
    active = [p for tag in sorted(stage.modules) for p in groups[tag]]
    frozen = snapshot_params(model, stage.modules)

    for p in model.parameters():
        p.requires_grad_(False)
    for p in active:
        p.requires_grad_(True)

    model.train()
    opt = torch.optim.Adam(active, lr=stage.lr)
    drop_at = int(cfg.training.lr_drop_fraction * stage.steps)
    out_dir = Path(cfg.training.out_dir)
    last_good: str | None = None

    try:
        for step in range(stage.steps):
            if stage.lr_end is not None and step == drop_at and drop_at > 0:
                for g in opt.param_groups:
                    g["lr"] = stage.lr_end
            weights = LossWeights.sample(rng, cfg.weights)
            batch = dataset.sample_batch(rng, stage.gop, cfg.training.batch_clips)
            qpos = model.quality_position(
                weights.lambda_mse, cfg.weights.lambda_mse_min, cfg.weights.lambda_mse_max,
            )
            outputs = model.forward_gop(batch, qpos, qmode="noise", generator=noise_gen)
            try:
                report = recipe_loss(stage.recipe, outputs, weights, cfg, model)
            except FloatingPointError:
                raise TrainingDiverged(stage.name, step, last_good)

            opt.zero_grad()
            report.total.backward()
            if cfg.training.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(active, cfg.training.grad_clip)
            opt.step()

            if metrics is not None:
                row = {
                    "step": global_step0 + step, "stage": stage.name, "recipe": stage.recipe,
                    "lr": opt.param_groups[0]["lr"], "lambda_mse": weights.lambda_mse,
                    "total": float(report.total.detach()), "bpp": report.bpp,
                }
                row.update(report.components)
                metrics.write(row)
            if cfg.training.checkpoint_every and (step + 1) % cfg.training.checkpoint_every == 0:
                path = out_dir / f"ckpt_{stage.name}_{step + 1}.pt"
                save_checkpoint(model, path, stage_history=[stage.name])
                last_good = str(path)
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
    verify_frozen(model, frozen)
    return global_step0 + stage.steps


def run_plan(
    model: MachineVideoCodec,
    cfg: RunConfig,
    scale_factor: float | None = None,
    stage_names: tuple[str, ...] | None = None,
    metrics_path: str | Path | None = None,
) -> Path:
    """Run the (possibly filtered) stage plan; returns the final checkpoint
    path.  Stage k uses seed seed+k so runs are reproducible end to end."""
    plan = build_stage_plan(cfg, scale_factor)
    dataset = ClipDataset(cfg.data, base_seed=cfg.seed)
    out_dir = Path(cfg.training.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = MetricsWriter(metrics_path or out_dir / "metrics.csv")
    history: list[str] = []
    step = 0
    for k, stage in enumerate(plan.stages):
        if stage_names is not None and stage.name not in stage_names:
            continue
        step = run_stage(model, stage, dataset, cfg, seed=cfg.seed + 1000 + k,
                         metrics=metrics, global_step0=step)
        history.append(stage.name)
        save_checkpoint(model, out_dir / f"after_{stage.name}.pt", stage_history=history)
    final = out_dir / "final.pt"
    save_checkpoint(model, final, stage_history=history)
    return final


def train_from_config(cfg: RunConfig, scale_factor: float | None = None) -> Path:
    torch.manual_seed(cfg.seed)
    model = MachineVideoCodec(cfg.model)
    return run_plan(model, cfg, scale_factor)


def overfit_one_gop(
    model: MachineVideoCodec,
    frames: torch.Tensor,
    cfg: RunConfig,
    steps: int = 400,
    lr: float = 1e-4,
    lambda_mse: float = 256.0,
    seed: int = 0,
) -> list[float]:
    """Drive L_total down on a single fixed GOP; returns the loss trajectory."""
    weights = LossWeights(
        lambda_mse=lambda_mse, lambda_lpips=lambda_mse,
        lambda_e=cfg.weights.lambda_e, lambda_cons=lambda_mse,
    )
    noise_gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    qpos = model.quality_position(lambda_mse, cfg.weights.lambda_mse_min, cfg.weights.lambda_mse_max)
    model.train()
    losses: list[float] = []
    for _ in range(steps):
        outputs = model.forward_gop(frames, qpos, qmode="noise", generator=noise_gen)
        report = recipe_loss("total", outputs, weights, cfg, model)
        opt.zero_grad()
        report.total.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        losses.append(float(report.total.detach()))
    return losses
