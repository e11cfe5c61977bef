"""Rate-task curves, BD-rate oracles, the ablation registry, tap export,
and the analysis helpers."""

import dataclasses
import json
import math

import numpy as np
import pytest
import torch
from PIL import Image

from semcodec.config import DataConfig, ModelConfig, RunConfig
from semcodec.core import RatePoint
from semcodec.data import ClipDataset, make_probe_image
from semcodec.evalkit import (
    ABLATIONS,
    LAMBDA_E_GRID,
    EvalError,
    RateTaskCurve,
    StreamMismatchError,
    _probe_class,
    apply_ablation,
    bd_rate,
    export_feature_taps,
    measure_conditional_entropy,
    measure_feature_mse,
    plot_curves,
    pooled_tap_features,
    save_alpha_heatmaps,
    silhouette_score,
    sweep_rate_points,
    transfer_matching_weights,
    write_probe_set,
)
from semcodec.model import MachineVideoCodec
from semcodec.proxy_task import SegHead


def _curve(bpps, metrics, cid="c") -> RateTaskCurve:
    pts = tuple(RatePoint(bpp=b, metric_name="mean_iou", metric_value=m)
                for b, m in zip(bpps, metrics))
    return RateTaskCurve(codec_id=cid, task_id="t", points=pts)


def tiny_model() -> MachineVideoCodec:
    torch.manual_seed(0)
    return MachineVideoCodec(ModelConfig(
        ch_full=8, ch_half=12, ch_quarter=16, ch_latent=16,
        ch_motion_latent=8, sem_base=8, de_hidden=8,
        flow_levels=2, flow_hidden=8,
    ))


# ----------------------------------------------------------------- curves


def test_curve_needs_four_points():
    with pytest.raises(ValueError, match="4 points"):
        _curve([0.1, 0.2, 0.3], [0.5, 0.6, 0.7])


def test_curve_needs_increasing_bpp():
    with pytest.raises(ValueError, match="increasing bpp"):
        _curve([0.1, 0.2, 0.2, 0.4], [0.5, 0.6, 0.7, 0.8])


def test_curve_json_round_trip(tmp_path):
    c = _curve([0.1, 0.2, 0.4, 0.8], [0.3, 0.5, 0.6, 0.65], cid="anchor")
    path = tmp_path / "curve.json"
    c.save(path)
    loaded = RateTaskCurve.load(path)
    assert loaded == c
    doc = json.loads(path.read_text())
    assert doc["codec_id"] == "anchor"
    assert len(doc["points"]) == 4


# ---------------------------------------------------------------- BD-rate


def test_bd_rate_identical_curves_is_zero():
    c = _curve([0.1, 0.2, 0.4, 0.8], [0.3, 0.5, 0.6, 0.65])
    res = bd_rate(c, c)
    assert res.valid
    assert res.percent == 0.0


def test_bd_rate_ten_percent_saving():
    bpps = [0.1, 0.2, 0.4, 0.8]
    metrics = [0.3, 0.5, 0.6, 0.65]
    anchor = _curve(bpps, metrics, "anchor")
    test = _curve([0.9 * b for b in bpps], metrics, "test")
    res = bd_rate(anchor, test)
    assert res.valid
    assert abs(res.percent - (-10.0)) < 1e-6


def test_bd_rate_scaling_invariance_over_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(4, 7))
        # metric strictly increasing with bpp on both curves, shared range
        base_metric = np.sort(rng.uniform(0.2, 0.9, size=n))
        while np.any(np.diff(base_metric) <= 0):
            base_metric = np.sort(rng.uniform(0.2, 0.9, size=n))
        bpp_a = np.cumsum(rng.uniform(0.05, 0.5, size=n))
        bpp_b = np.cumsum(rng.uniform(0.05, 0.5, size=n))
        a = _curve(bpp_a.tolist(), base_metric.tolist(), "a")
        b = _curve(bpp_b.tolist(), base_metric.tolist(), "b")
        ref = bd_rate(a, b)
        assert ref.valid
        k = float(rng.uniform(0.05, 20.0))
        a2 = _curve((bpp_a * k).tolist(), base_metric.tolist(), "a")
        b2 = _curve((bpp_b * k).tolist(), base_metric.tolist(), "b")
        res = bd_rate(a2, b2)
        assert abs(res.percent - ref.percent) < 1e-9, (k, ref.percent, res.percent)


def test_bd_rate_sign_flips_under_swap():
    anchor = _curve([0.1, 0.2, 0.4, 0.8], [0.3, 0.5, 0.6, 0.65], "a")
    cheaper = _curve([0.08, 0.16, 0.32, 0.64], [0.3, 0.5, 0.6, 0.65], "b")
    fwd = bd_rate(anchor, cheaper)
    back = bd_rate(cheaper, anchor)
    assert fwd.percent < 0 < back.percent


def test_bd_rate_flags_degenerate_metric():
    # two points at the same task score cannot anchor an equal-metric
    # comparison; the result must be flagged, not crash
    anchor = _curve([0.1, 0.2, 0.4, 0.8], [0.3, 0.5, 0.6, 0.65], "a")
    bad = _curve([0.1, 0.2, 0.4, 0.8], [0.3, 0.5, 0.5, 0.65], "b")
    res = bd_rate(anchor, bad)
    assert not res.valid
    assert math.isnan(res.percent)
    assert "monotone" in res.reason


def test_bd_rate_flags_disjoint_metric_ranges():
    a = _curve([0.1, 0.2, 0.4, 0.8], [0.1, 0.15, 0.2, 0.25], "a")
    b = _curve([0.1, 0.2, 0.4, 0.8], [0.5, 0.6, 0.7, 0.8], "b")
    res = bd_rate(a, b)
    assert not res.valid
    assert "overlap" in res.reason


def test_bd_rate_records_ids_and_interval():
    a = _curve([0.1, 0.2, 0.4, 0.8], [0.3, 0.5, 0.6, 0.65], "anchor")
    b = _curve([0.1, 0.2, 0.4, 0.8], [0.25, 0.45, 0.62, 0.7], "test")
    res = bd_rate(a, b)
    assert res.anchor_id == "anchor" and res.test_id == "test"
    lo, hi = res.overlap_interval
    assert lo == pytest.approx(0.3) and hi == pytest.approx(0.65)


# ----------------------------------------------------------------- sweeps


def test_sweep_needs_four_qualities():
    model = tiny_model()
    ds = ClipDataset(DataConfig(num_clips=1, frames_per_clip=2), base_seed=0)
    with pytest.raises(ValueError, match="4 quality"):
        sweep_rate_points(model, ds, SegHead(hidden=8), (0, 1, 2), 2, 1)


def test_sweep_produces_a_curve_from_real_streams():
    model = tiny_model()
    ds = ClipDataset(DataConfig(num_clips=1, frames_per_clip=3), base_seed=0)
    torch.manual_seed(1)
    head = SegHead(hidden=8)
    curve = sweep_rate_points(model, ds, head, (0, 1, 2, 3), gop_size=2,
                              num_clips=1, codec_id="probe")
    assert curve.codec_id == "probe"
    assert len(curve.points) == 4
    bpps = [p.bpp for p in curve.points]
    assert all(b2 > b1 for b1, b2 in zip(bpps, bpps[1:]))
    assert all(0.0 <= p.metric_value <= 1.0 for p in curve.points)


def test_sweep_raises_when_stream_decode_diverges(monkeypatch):
    model = tiny_model()
    ds = ClipDataset(DataConfig(num_clips=1, frames_per_clip=2), base_seed=0)
    real = model.decode_clip

    def corrupted(data):
        frames, header = real(data)
        frames[0] = frames[0] + 1e-3
        return frames, header

    monkeypatch.setattr(model, "decode_clip", corrupted)
    with pytest.raises(StreamMismatchError, match="differs"):
        sweep_rate_points(model, ds, SegHead(hidden=8), (0, 1, 2, 3), 2, 1)


def test_measure_feature_mse_returns_positive_pair(toy_cfg):
    model = tiny_model()
    cfg = dataclasses.replace(toy_cfg, model=model.cfg)
    ds = ClipDataset(DataConfig(num_clips=1, frames_per_clip=3), base_seed=0)
    mse, bpp = measure_feature_mse(model, ds, cfg, quality=1, num_clips=1, gop_size=2)
    assert mse > 0 and np.isfinite(mse)
    assert bpp > 0


def test_measure_conditional_entropy_positive(toy_cfg):
    model = tiny_model()
    cfg = dataclasses.replace(toy_cfg, model=model.cfg)
    ds = ClipDataset(DataConfig(num_clips=1, frames_per_clip=3), base_seed=0)
    h = measure_conditional_entropy(model, cfg, ds, num_clips=1, gop_size=2)
    assert np.isfinite(h) and h > 0


def test_measure_conditional_entropy_needs_clips(toy_cfg):
    model = tiny_model()
    cfg = dataclasses.replace(toy_cfg, model=model.cfg)
    ds = ClipDataset(DataConfig(num_clips=1, frames_per_clip=3), base_seed=0)
    with pytest.raises(EvalError, match="no conditional-entropy"):
        measure_conditional_entropy(model, cfg, ds, num_clips=0, gop_size=2)


# -------------------------------------------------------------- ablations


def test_ablation_registry_covers_the_grid():
    assert set(ABLATIONS) == {f"M{i}" for i in range(12)} | {"NOBIEC"}
    for vid, (desc, _) in ABLATIONS.items():
        assert isinstance(desc, str) and desc


def test_lambda_grid():
    assert LAMBDA_E_GRID == (0.1, 0.5, 1.0, 5.0, 10.0)


@pytest.mark.parametrize("variant,field,value", [
    ("M1", "biec_directions", ("mvs_given_vb",)),
    ("M2", "biec_directions", ("vb_given_mvs",)),
    ("M3", "biec_scales", (16,)),
    ("M6", "alignment", "mse"),
    ("M7", "alignment", "kl_channel"),
    ("M8", "alignment", "kl_spatial"),
    ("M9", "fusion_mode", "concat"),
    ("M10", "fusion_mode", "add"),
    ("M11", "fusion_mode", "semantic_only"),
    ("NOBIEC", "alignment", "none"),
])
def test_ablation_patches(variant, field, value, toy_cfg):
    patched = apply_ablation(toy_cfg, variant)
    assert getattr(patched.model, field) == value


def test_ablation_m4_m5_combine_scale_and_direction(toy_cfg):
    m4 = apply_ablation(toy_cfg, "M4").model
    assert m4.biec_scales == (16,) and m4.biec_directions == ("mvs_given_vb",)
    m5 = apply_ablation(toy_cfg, "M5").model
    assert m5.biec_scales == (16,) and m5.biec_directions == ("vb_given_mvs",)


def test_ablation_m0_is_identity(toy_cfg):
    assert apply_ablation(toy_cfg, "M0").model == toy_cfg.model


def test_ablation_does_not_mutate_input(toy_cfg):
    before = dataclasses.asdict(toy_cfg.model)
    apply_ablation(toy_cfg, "M6")
    assert dataclasses.asdict(toy_cfg.model) == before


def test_unknown_ablation_lists_the_registry(toy_cfg):
    with pytest.raises(KeyError, match="M4"):
        apply_ablation(toy_cfg, "M99")


def test_transfer_matching_weights_counts():
    full = tiny_model()
    narrow_cfg = dataclasses.replace(full.cfg, biec_scales=(16,))
    torch.manual_seed(1)
    narrow = MachineVideoCodec(narrow_cfg)
    state = full.state_dict()
    copied, skipped = transfer_matching_weights(narrow, state)
    assert copied > 0 and skipped > 0
    assert copied + skipped == len(state)
    own = narrow.state_dict()
    n_equal = sum(
        int(torch.equal(own[k], v)) for k, v in state.items()
        if k in own and own[k].shape == v.shape
    )
    assert n_equal == copied


# ------------------------------------------------------------- tap export


def test_write_probe_set_layout(tmp_path):
    paths = write_probe_set(tmp_path, per_class=2, size=32)
    assert len(paths) == 6
    names = sorted(p.name for p in paths)
    assert names == ["class1_0.png", "class1_1.png", "class2_0.png",
                     "class2_1.png", "class3_0.png", "class3_1.png"]
    img = Image.open(paths[0])
    assert img.size == (32, 32)


def test_probe_class_parsing():
    assert _probe_class("class2_1") == 2
    assert _probe_class("class11_0") == 11
    assert _probe_class("classx_1") == -1
    assert _probe_class("photo") == -1


def test_export_feature_taps_archive(untrained_ckpt, tmp_path):
    probes = tmp_path / "probes"
    write_probe_set(probes, per_class=1, size=64)
    before = untrained_ckpt.read_bytes()
    out = export_feature_taps(untrained_ckpt, probes, tmp_path / "taps.npz")
    assert untrained_ckpt.read_bytes() == before, "export must not touch the checkpoint"
    with np.load(out) as z:
        keys = sorted(z.files)
        assert keys == ["class1_0.class1", "class2_0.class2", "class3_0.class3"]
        arr = z[keys[0]]
        assert arr.ndim == 3 and arr.shape[-2:] == (8, 8)


def test_export_feature_taps_requires_probes(untrained_ckpt, tmp_path):
    empty = tmp_path / "none"
    empty.mkdir()
    with pytest.raises(EvalError, match="probes"):
        export_feature_taps(untrained_ckpt, empty, tmp_path / "taps.npz")


def test_pooled_tap_features_shape():
    model = tiny_model()
    imgs = torch.stack([make_probe_image(seed=i, class_id=1 + i % 3)[0]
                        for i in range(3)])
    rows = pooled_tap_features(model, imgs)
    assert rows.shape == (3, model.cfg.ch_quarter)
    assert np.isfinite(rows).all()


# ----------------------------------------------------------- silhouette


def test_silhouette_hand_oracle():
    feats = np.array([[0.0], [0.1], [10.0], [10.1]])
    labels = np.array([0, 0, 1, 1])
    # s_i = (b - a)/max(a,b): a = 0.1 for everyone; b = 10.05 or 9.95
    want = (2 * (9.95 / 10.05) + 2 * (9.85 / 9.95)) / 4
    assert silhouette_score(feats, labels) == pytest.approx(want, abs=1e-12)


def test_silhouette_singleton_cluster_scores_zero():
    feats = np.array([[0.0], [1.0], [2.0]])
    labels = np.array([0, 0, 1])
    # points: (2-1)/2 = 0.5, (1-1)/1 = 0, singleton -> 0
    assert silhouette_score(feats, labels) == pytest.approx(0.5 / 3)


def test_silhouette_needs_two_classes():
    with pytest.raises(ValueError, match="two classes"):
        silhouette_score(np.zeros((3, 2)), np.zeros(3, dtype=int))


def test_silhouette_separated_clusters_near_one():
    rng = np.random.default_rng(0)
    a = rng.normal(0.0, 0.01, size=(10, 4))
    b = rng.normal(5.0, 0.01, size=(10, 4))
    feats = np.concatenate([a, b])
    labels = np.array([0] * 10 + [1] * 10)
    assert silhouette_score(feats, labels) > 0.95


# -------------------------------------------------------------- plotting


def test_plot_curves_writes_an_image(tmp_path):
    c1 = _curve([0.1, 0.2, 0.4, 0.8], [0.3, 0.5, 0.6, 0.65], "a")
    c2 = _curve([0.15, 0.3, 0.5, 0.9], [0.35, 0.55, 0.62, 0.7], "b")
    out = plot_curves([c1, c2], tmp_path / "rt.png")
    img = Image.open(out)
    assert img.size == (640, 480)
    # something was actually drawn
    assert len(set(img.convert("L").tobytes())) > 1


def test_plot_curves_rejects_empty(tmp_path):
    with pytest.raises(ValueError, match="nothing"):
        plot_curves([], tmp_path / "rt.png")


def test_alpha_heatmaps_per_frame(tmp_path):
    model = tiny_model()
    ds = ClipDataset(DataConfig(num_clips=1, frames_per_clip=3), base_seed=0)
    paths = save_alpha_heatmaps(model, ds, tmp_path, quality=0)
    assert len(paths) == 3
    img = Image.open(paths[0])
    assert img.size == (64, 64)


def test_alpha_heatmaps_skip_ungated_models(tmp_path):
    torch.manual_seed(0)
    model = MachineVideoCodec(dataclasses.replace(tiny_model().cfg, fusion_mode="add"))
    ds = ClipDataset(DataConfig(num_clips=1, frames_per_clip=2), base_seed=0)
    assert save_alpha_heatmaps(model, ds, tmp_path, quality=0) == []
