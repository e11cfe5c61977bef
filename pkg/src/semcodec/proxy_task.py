"""Desk-scale downstream task: per-pixel shape segmentation.

A small CNN head is trained once on original (uncompressed) synthetic frames
with a fixed seed, then frozen and shipped as a fixture; evaluating codecs
against this frozen head isolates compression effects from task-model drift.
The task metric is mean IoU over the classes present in the labels.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import DataConfig
from .data import NUM_CLASSES, ClipDataset

_TRAIN_SEED = 77


class SegHead(nn.Module):
    def __init__(self, hidden: int = 48):
        super().__init__()
        act = nn.GELU()
        self.net = nn.Sequential(
            nn.Conv2d(3, hidden, 3, padding=1), nn.GroupNorm(4, hidden), act,
            nn.Conv2d(hidden, hidden, 3, padding=2, dilation=2), nn.GroupNorm(4, hidden), act,
            nn.Conv2d(hidden, hidden, 3, padding=4, dilation=4), nn.GroupNorm(4, hidden), act,
            nn.Conv2d(hidden, hidden, 3, padding=8, dilation=8), nn.GroupNorm(4, hidden), act,
            nn.Conv2d(hidden, NUM_CLASSES, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.net(x).argmax(dim=1)


def mean_iou(pred: torch.Tensor, target: torch.Tensor, num_classes: int = NUM_CLASSES) -> float:
    """Mean IoU over classes that appear in prediction or target."""
    if pred.shape != target.shape:
        raise ValueError("prediction/label shape mismatch")
    ious = []
    for c in range(num_classes):
        p = pred == c
        t = target == c
        union = (p | t).sum().item()
        if union == 0:
            continue
        ious.append((p & t).sum().item() / union)
    return float(np.mean(ious)) if ious else 0.0


def train_head(data_cfg: DataConfig, steps: int = 1200, lr: float = 3e-3,
               seed: int = _TRAIN_SEED) -> SegHead:
    torch.manual_seed(seed)
    head = SegHead()
    opt = torch.optim.Adam(head.parameters(), lr=lr)
    ds = ClipDataset(data_cfg, base_seed=seed)
    rng = np.random.default_rng(seed)
    # background dominates the pixel count; downweight it so the shape
    # classes actually drive the loss
    class_weights = torch.tensor([0.25] + [1.0] * (NUM_CLASSES - 1))
    head.train()
    for step in range(steps):
        if step == int(0.8 * steps):
            for g in opt.param_groups:
                g["lr"] = lr / 3
        lc = ds.labeled(int(rng.integers(0, len(ds))))
        frames = lc.frames_tensor()
        idx = rng.choice(frames.shape[0], size=min(4, frames.shape[0]), replace=False)
        x = frames[idx]
        y = lc.masks[idx]
        loss = nn.functional.cross_entropy(head(x), y, weight=class_weights)
        opt.zero_grad()
        loss.backward()
        opt.step()
    head.eval()
    for p in head.parameters():
        p.requires_grad_(False)
    return head


def build_or_load_head(path: str | Path, data_cfg: DataConfig) -> SegHead:
    """Train-once fixture: load the frozen head if present, else train and save."""
    path = Path(path)
    head = SegHead()
    if path.exists():
        head.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
        head.eval()
        for p in head.parameters():
            p.requires_grad_(False)
        return head
    head = train_head(data_cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(head.state_dict(), path)
    return head


def proxy_task_eval(head: SegHead, frames: torch.Tensor, labels: torch.Tensor) -> float:
    """Mean IoU of the frozen head's predictions on (T, 3, H, W) frames."""
    if frames.shape[0] != labels.shape[0]:
        raise ValueError("frame/label count mismatch")
    head.eval()
    pred = head.predict(frames)
    return mean_iou(pred, labels)
