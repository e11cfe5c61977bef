"""Command-line surface.

Every subcommand runs locally by default; `encode`/`decode` can instead talk
to a running service with --server.  Exit codes are categorized:

    0  success
    2  bad usage (click)
    3  configuration error
    4  data / file error
    5  checkpoint error
    6  bitstream error
    7  training divergence
    8  evaluation error
"""

from __future__ import annotations

import base64
import functools
import json
import sys
from pathlib import Path

import click

EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_CHECKPOINT = 5
EXIT_STREAM = 6
EXIT_TRAINING = 7
EXIT_EVAL = 8


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def guarded(fn):
    """Map exception classes onto the documented exit-code categories."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        from .bitstream import BitstreamError
        from .evalkit import EvalError
        from .rangecoder import RangeCoderError
        from .training import TrainingDiverged

        try:
            return fn(*args, **kwargs)
        except TrainingDiverged as exc:
            _fail(EXIT_TRAINING, str(exc))
        except (BitstreamError, RangeCoderError) as exc:
            _fail(EXIT_STREAM, str(exc))
        except EvalError as exc:
            _fail(EXIT_EVAL, str(exc))
        except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
            _fail(EXIT_DATA, str(exc))
        except (KeyError, ValueError, TypeError) as exc:
            _fail(EXIT_CONFIG, str(exc))

    return wrapper


def _load_model(checkpoint: str):
    from .model import load_checkpoint

    try:
        model, payload = load_checkpoint(checkpoint)
    except FileNotFoundError:
        _fail(EXIT_CHECKPOINT, f"checkpoint not found: {checkpoint}")
    except Exception as exc:  # torch.load failures, version mismatch
        _fail(EXIT_CHECKPOINT, f"cannot load checkpoint {checkpoint}: {exc}")
    model.eval()
    return model, payload


@click.group()
def main() -> None:
    """Machine-oriented learned video codec."""


@main.command()
@click.option("--input", "input_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--output", "output_file", required=True, type=click.Path(dir_okay=False))
@click.option("--quality", required=True, type=int)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option("--gop", default=6, show_default=True, type=int)
@click.option("--server", default=None, help="Route through a running service instead.")
@guarded
def encode(input_dir, output_file, quality, checkpoint, gop, server) -> None:
    """Encode a directory of numbered PNG frames into one container file."""
    out = Path(output_file)
    out.parent.mkdir(parents=True, exist_ok=True)
    if server:
        import httpx

        frames_b64 = [
            base64.b64encode(p.read_bytes()).decode("ascii")
            for p in sorted(Path(input_dir).glob("*.png"))
        ]
        if not frames_b64:
            _fail(EXIT_DATA, f"no PNG frames found in {input_dir}")
        resp = httpx.post(
            f"{server.rstrip('/')}/encode",
            json={"frames_b64": frames_b64, "quality": quality, "gop_size": gop},
            timeout=600.0,
        )
        if resp.status_code != 200:
            _fail(EXIT_STREAM, f"service error {resp.status_code}: {resp.text}")
        body = resp.json()
        out.write_bytes(base64.b64decode(body["stream_b64"]))
        click.echo(json.dumps({"bytes": out.stat().st_size, "bpp": body["bpp"]}))
        return
    if not checkpoint:
        _fail(EXIT_CHECKPOINT, "--checkpoint is required when not using --server")
    from .core import load_clip

    model, _ = _load_model(checkpoint)
    clip = load_clip(input_dir, gop_size=gop)
    if quality < 0 or quality >= model.cfg.num_qualities:
        _fail(EXIT_CONFIG, f"quality must be in [0, {model.cfg.num_qualities - 1}]")
    stream, _ = model.encode_clip(clip, quality, gop)
    out.write_bytes(stream)
    h, w = clip.frames[0].pixels.shape[-2:]
    bpp = len(stream) * 8 / (len(clip.frames) * h * w)
    click.echo(json.dumps({"bytes": len(stream), "bpp": bpp}))


@main.command()
@click.option("--input", "input_file", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--output", "output_dir", required=True, type=click.Path(file_okay=False))
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option("--server", default=None, help="Route through a running service instead.")
@guarded
def decode(input_file, output_dir, checkpoint, server) -> None:
    """Decode a container file back into numbered PNG frames."""
    out_dir = Path(output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stream = Path(input_file).read_bytes()
    if server:
        import httpx

        resp = httpx.post(
            f"{server.rstrip('/')}/decode",
            json={"stream_b64": base64.b64encode(stream).decode("ascii")},
            timeout=600.0,
        )
        if resp.status_code != 200:
            _fail(EXIT_STREAM, f"service error {resp.status_code}: {resp.text}")
        body = resp.json()
        for i, b64 in enumerate(body["frames_b64"]):
            (out_dir / f"{i:06d}.png").write_bytes(base64.b64decode(b64))
        click.echo(json.dumps({"frames": len(body["frames_b64"]), "dir": str(out_dir)}))
        return
    if not checkpoint:
        _fail(EXIT_CHECKPOINT, "--checkpoint is required when not using --server")
    from .core import Clip, Frame, save_clip

    model, _ = _load_model(checkpoint)
    frames, header = model.decode_clip(stream)
    clip = Clip(
        [Frame(p, i) for i, p in enumerate(frames)],
        gop_size=header.gop_size,
    )
    save_clip(clip, out_dir)
    click.echo(json.dumps({"frames": len(frames), "dir": str(out_dir)}))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--stage-scale", default=None, type=float,
              help="Shrink every stage's step budget by this factor.")
@guarded
def train(config_path, stage_scale) -> None:
    """Run the full staged training schedule from a YAML config."""
    from .config import load_config
    from .training import train_from_config

    cfg = load_config(config_path)
    final = train_from_config(cfg, stage_scale)
    click.echo(json.dumps({"checkpoint": str(final)}))


@main.group(name="eval")
def eval_group() -> None:
    """Rate-task evaluation commands."""


@eval_group.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--checkpoint", default=None, type=click.Path(exists=True, dir_okay=False),
              help="Overrides the checkpoint named in the config.")
@click.option("--plot", "plot_path", default=None, type=click.Path(dir_okay=False))
@guarded
def sweep(config_path, out_path, checkpoint, plot_path) -> None:
    """Sweep the quality ladder and write the rate-task curve as JSON."""
    from .config import load_config
    from .data import ClipDataset
    from .evalkit import plot_curves, sweep_rate_points
    from .proxy_task import build_or_load_head

    cfg = load_config(config_path)
    ckpt = checkpoint or cfg.eval.checkpoint
    if not ckpt:
        _fail(EXIT_CHECKPOINT, "no checkpoint: set eval.checkpoint in the config or pass --checkpoint")
    model, _ = _load_model(ckpt)
    head = build_or_load_head(Path(cfg.training.out_dir) / "proxy_head.pt", cfg.data)
    dataset = ClipDataset(cfg.data, base_seed=cfg.seed + 7)
    curve = sweep_rate_points(
        model, dataset, head,
        qualities=cfg.eval.qualities, gop_size=cfg.eval.gop_size,
        num_clips=cfg.eval.num_clips,
    )
    curve.save(out_path)
    if plot_path:
        plot_curves([curve], plot_path)
    click.echo(json.dumps(curve.to_dict()))


@eval_group.command()
@click.option("--anchor", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--test", "test_path", required=True, type=click.Path(exists=True, dir_okay=False))
@guarded
def bdrate(anchor, test_path) -> None:
    """BD-rate of a test curve against an anchor curve (JSON files)."""
    from .evalkit import RateTaskCurve, bd_rate

    result = bd_rate(RateTaskCurve.load(anchor), RateTaskCurve.load(test_path))
    click.echo(json.dumps({
        "percent": result.percent if result.valid else None,
        "anchor": result.anchor_id,
        "test": result.test_id,
        "overlap": list(result.overlap_interval),
        "valid": result.valid,
        "reason": result.reason,
    }))


@main.command()
@click.option("--variant", required=True)
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--stage-scale", default=None, type=float)
@click.option("--base-checkpoint", default=None, type=click.Path(exists=True, dir_okay=False),
              help="Shared pixel-codec checkpoint; trained on the fly when omitted.")
@click.option("--out-dir", default=None, type=click.Path(file_okay=False))
@guarded
def ablate(variant, config_path, stage_scale, base_checkpoint, out_dir) -> None:
    """Train and evaluate one registered variant, or the entropy-weight sweep
    (variant id: lambda_e)."""
    from .config import load_config
    from .evalkit import lambda_e_sweep, run_ablation, train_base_checkpoint
    from .proxy_task import build_or_load_head

    cfg = load_config(config_path)
    if variant.lower().replace("-", "_") == "lambda_e":
        base = base_checkpoint or train_base_checkpoint(cfg, stage_scale)
        rows = lambda_e_sweep(cfg, base, stage_scale, out_dir=out_dir)
        click.echo(json.dumps(rows))
        return
    head = build_or_load_head(Path(cfg.training.out_dir) / "proxy_head.pt", cfg.data)
    bundle = run_ablation(
        variant, cfg, head,
        scale_factor=stage_scale, base_checkpoint=base_checkpoint, out_dir=out_dir,
    )
    click.echo(json.dumps(bundle))


@main.command(name="export-taps")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--probes", "probes_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False))
@click.option("--quality", default=None, type=int)
@guarded
def export_taps(checkpoint, probes_dir, out_path, quality) -> None:
    """Archive 1/8-scale semantic taps of probe images (zero reference)."""
    from .evalkit import export_feature_taps

    out = out_path or str(Path(probes_dir) / "taps.npz")
    path = export_feature_taps(checkpoint, probes_dir, out, quality=quality)
    click.echo(json.dumps({"archive": str(path)}))


@main.command()
@click.option("--checkpoint", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
@guarded
def serve(checkpoint, host, port) -> None:
    """Start the HTTP service."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(checkpoint), host=host, port=port)


if __name__ == "__main__":
    main()
