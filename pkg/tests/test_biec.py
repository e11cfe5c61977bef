"""Bi-directional conditional-entropy alignment: DE modules, stop-gradients,
report keys, the alignment ablation variants, and trainability."""

import math

import pytest
import torch

from semcodec.backbones import backbone_channels, extract_pyramid
from semcodec.biec import (
    DIRECTIONS,
    BiecAligner,
    DEModule,
    FeaturePyramidPair,
    conditional_entropy,
)
from semcodec.config import ModelConfig
from semcodec.entropy import SIGMA_MIN, DistributionParams, laplace_bin_prob


def tiny_cfg(**kw) -> ModelConfig:
    base = dict(ch_full=8, ch_half=12, ch_quarter=16, ch_latent=16,
                ch_motion_latent=8, sem_base=8, de_hidden=8)
    base.update(kw)
    return ModelConfig(**base)


def _pair(cfg: ModelConfig, seed=0, hw=16) -> FeaturePyramidPair:
    g = torch.Generator().manual_seed(seed)
    vb_ch = backbone_channels(cfg.backbone)
    mvs_ch = {16: cfg.ch_latent, 8: cfg.ch_quarter, 4: cfg.ch_quarter}
    mvs, vb = {}, {}
    for s in (4, 8, 16):
        d = hw * 4 // s
        mvs[s] = torch.randn(1, mvs_ch[s], d, d, generator=g)
        vb[s] = torch.randn(1, vb_ch[s], d, d, generator=g)
    return FeaturePyramidPair(mvs=mvs, vb=vb)


# ------------------------------------------------------------- DE modules


def test_de_module_output_contract():
    torch.manual_seed(0)
    de = DEModule(cond_channels=6, target_channels=10, hidden=8)
    params = de(torch.randn(2, 6, 8, 8))
    assert params.mu.shape == (2, 10, 8, 8)
    assert params.sigma.shape == (2, 10, 8, 8)
    assert (params.sigma >= SIGMA_MIN).all()


def test_de_module_channel_guard():
    de = DEModule(cond_channels=6, target_channels=10, hidden=8)
    with pytest.raises(ValueError, match="channels"):
        de(torch.randn(1, 7, 8, 8))


def test_de_sigma_floor_is_reachable_exactly():
    # drive the sigma head to a hugely negative output: softplus underflows
    # below the float ulp of the floor, so sigma == SIGMA_MIN bitwise
    torch.manual_seed(0)
    de = DEModule(cond_channels=4, target_channels=4, hidden=8)
    with torch.no_grad():
        de.sigma_head.weight.zero_()
        de.sigma_head.bias.fill_(-50.0)
    params = de(torch.randn(1, 4, 4, 4))
    assert (params.sigma == SIGMA_MIN).all()


# -------------------------------------------------------- pyramid pairing


def test_pair_rejects_scale_set_mismatch():
    with pytest.raises(ValueError, match="scale sets"):
        FeaturePyramidPair(mvs={4: torch.zeros(1, 2, 8, 8)},
                           vb={8: torch.zeros(1, 2, 4, 4)})


def test_pair_rejects_spatial_mismatch():
    with pytest.raises(ValueError, match="spatial"):
        FeaturePyramidPair(mvs={4: torch.zeros(1, 2, 8, 8)},
                           vb={4: torch.zeros(1, 2, 4, 4)})


def test_pair_from_outputs_wires_scales():
    cfg = tiny_cfg()
    from semcodec.semantic import SemanticDecoder

    torch.manual_seed(0)
    dec = SemanticDecoder(cfg)
    taps = dec(torch.randn(1, cfg.ch_latent, 4, 4),
               torch.randn(1, cfg.ch_half, 32, 32),
               torch.randn(1, cfg.ch_quarter, 16, 16))
    pyr = extract_pyramid(cfg.backbone, torch.rand(1, 3, 64, 64))
    pair = FeaturePyramidPair.from_outputs(taps, pyr)
    assert set(pair.mvs) == set(pair.vb) == {4, 8, 16}


# ------------------------------------------------------------ biec loss


def test_biec_report_carries_all_six_terms():
    cfg = tiny_cfg()
    torch.manual_seed(0)
    aligner = BiecAligner(cfg, backbone_channels(cfg.backbone))
    total, report = aligner.biec_loss(_pair(cfg))
    want_keys = {f"H_{d}@{s}" for d in DIRECTIONS for s in (4, 8, 16)}
    assert set(report) == want_keys
    assert torch.isfinite(total)
    assert abs(float(total) - sum(report.values())) < 1e-4


def test_biec_terms_are_per_element_bits():
    # randn targets under a clueless model cost a few bits per element,
    # far away from both 0 and the P_MIN ceiling of 16 bits
    cfg = tiny_cfg()
    torch.manual_seed(1)
    aligner = BiecAligner(cfg, backbone_channels(cfg.backbone))
    _, report = aligner.biec_loss(_pair(cfg, seed=4))
    for key, h in report.items():
        assert 0.1 < h < 16.0, (key, h)


def test_single_direction_configuration():
    cfg = tiny_cfg(biec_directions=("mvs_given_vb",))
    torch.manual_seed(0)
    aligner = BiecAligner(cfg, backbone_channels(cfg.backbone))
    _, report = aligner.biec_loss(_pair(cfg))
    assert set(report) == {"H_mvs_given_vb@4", "H_mvs_given_vb@8", "H_mvs_given_vb@16"}


def test_single_scale_configuration():
    cfg = tiny_cfg(biec_scales=(16,))
    torch.manual_seed(0)
    aligner = BiecAligner(cfg, backbone_channels(cfg.backbone))
    pair = _pair(cfg)
    pair16 = FeaturePyramidPair(mvs={16: pair.mvs[16]}, vb={16: pair.vb[16]})
    _, report = aligner.biec_loss(pair16)
    assert set(report) == {"H_mvs_given_vb@16", "H_vb_given_mvs@16"}


def test_backbone_side_is_gradient_stopped():
    cfg = tiny_cfg()
    torch.manual_seed(0)
    aligner = BiecAligner(cfg, backbone_channels(cfg.backbone))
    pair = _pair(cfg)
    mvs = {s: t.clone().requires_grad_() for s, t in pair.mvs.items()}
    vb = {s: t.clone().requires_grad_() for s, t in pair.vb.items()}
    total, _ = aligner.biec_loss(FeaturePyramidPair(mvs=mvs, vb=vb))
    total.backward()
    for s in (4, 8, 16):
        assert mvs[s].grad is not None and float(mvs[s].grad.abs().sum()) > 0
        assert vb[s].grad is None, f"guidance features leaked gradient at 1/{s}"


def test_conditional_entropy_matches_manual_sum():
    g = torch.Generator().manual_seed(5)
    target = torch.randn(2, 3, 4, 4, generator=g)
    mu = torch.randn(2, 3, 4, 4, generator=g)
    sigma = torch.rand(2, 3, 4, 4, generator=g) + 0.2
    got = float(conditional_entropy(target, DistributionParams(mu, sigma)))
    want = float(-torch.log2(laplace_bin_prob(target, mu, sigma)).sum())
    assert abs(got - want) < 1e-4
    with pytest.raises(ValueError):
        conditional_entropy(torch.zeros(2), DistributionParams(torch.zeros(3), torch.ones(3)))


# ------------------------------------------------- alignment variants


def test_alignment_variant_none_is_zero():
    cfg = tiny_cfg(alignment="none")
    torch.manual_seed(0)
    aligner = BiecAligner(cfg, backbone_channels(cfg.backbone))
    total, report = aligner.alignment_variant_loss(_pair(cfg), "none")
    assert float(total) == 0.0 and report == {}


@pytest.mark.parametrize("kind", ["mse", "kl_channel", "kl_spatial"])
def test_alignment_variants_finite_nonnegative(kind):
    cfg = tiny_cfg()
    torch.manual_seed(0)
    aligner = BiecAligner(cfg, backbone_channels(cfg.backbone))
    total, report = aligner.alignment_variant_loss(_pair(cfg), kind)
    assert torch.isfinite(total)
    assert float(total) > -1e-6  # MSE and KL are nonnegative
    assert set(report) == {f"align_{kind}@{s}" for s in (4, 8, 16)}


def test_alignment_variant_biec_delegates():
    cfg = tiny_cfg()
    torch.manual_seed(0)
    aligner = BiecAligner(cfg, backbone_channels(cfg.backbone))
    pair = _pair(cfg)
    t1, r1 = aligner.alignment_variant_loss(pair, "biec")
    t2, r2 = aligner.biec_loss(pair)
    assert float(t1) == float(t2) and r1 == r2


def test_alignment_variant_unknown_kind():
    cfg = tiny_cfg()
    aligner = BiecAligner(cfg, backbone_channels(cfg.backbone))
    with pytest.raises(ValueError, match="alignment kind"):
        aligner.alignment_variant_loss(_pair(cfg), "cosine")


def test_mse_variant_gradient_stops_on_guidance():
    cfg = tiny_cfg()
    torch.manual_seed(0)
    aligner = BiecAligner(cfg, backbone_channels(cfg.backbone))
    pair = _pair(cfg)
    vb = {s: t.clone().requires_grad_() for s, t in pair.vb.items()}
    total, _ = aligner.alignment_variant_loss(
        FeaturePyramidPair(mvs=pair.mvs, vb=vb), "mse")
    total.backward()
    assert all(vb[s].grad is None for s in vb)


# -------------------------------------------------------- trainability


def test_de_modules_overfit_a_fixed_pair():
    # conditional entropy of a FIXED pair is optimizable: mu moves toward the
    # target and sigma tightens until the small DE nets run out of capacity
    # (the pair is pure noise, so exact memorization is impossible).  500
    # steps reliably lands near 0.3x the initial loss; require half.
    cfg = tiny_cfg()
    torch.manual_seed(0)
    aligner = BiecAligner(cfg, backbone_channels(cfg.backbone))
    pair = _pair(cfg, seed=9, hw=8)
    opt = torch.optim.Adam(aligner.de.parameters(), lr=1e-3)
    first = None
    for step in range(500):
        total, _ = aligner.biec_loss(pair)
        if first is None:
            first = float(total)
        opt.zero_grad()
        total.backward()
        opt.step()
    final, _ = aligner.biec_loss(pair)
    assert float(final) < 0.50 * first, (first, float(final))


def test_biec_loss_is_deterministic():
    cfg = tiny_cfg()
    torch.manual_seed(0)
    aligner = BiecAligner(cfg, backbone_channels(cfg.backbone))
    pair = _pair(cfg)
    t1, _ = aligner.biec_loss(pair)
    t2, _ = aligner.biec_loss(pair)
    assert float(t1) == float(t2)


# --------------------------------------------------- analytic gradients


def test_conditional_entropy_gradients_match_finite_differences():
    g = torch.Generator().manual_seed(7)
    target = torch.randn(8, generator=g, dtype=torch.float64).requires_grad_()
    mu = torch.randn(8, generator=g, dtype=torch.float64).requires_grad_()
    sigma = (torch.rand(8, generator=g, dtype=torch.float64) + 0.4).requires_grad_()

    h = conditional_entropy(target, DistributionParams(mu, sigma))
    h.backward()

    with torch.no_grad():
        vals = [target.clone(), mu.clone(), sigma.clone()]

    def eval_h():
        with torch.no_grad():
            return conditional_entropy(vals[0], DistributionParams(vals[1], vals[2]))

    eps = 1e-6
    grads = [target.grad, mu.grad, sigma.grad]
    for t_idx in range(3):
        flat = vals[t_idx]
        for i in range(8):
            orig = float(flat[i])
            flat[i] = orig + eps
            hi = float(eval_h())
            flat[i] = orig - eps
            lo = float(eval_h())
            flat[i] = orig
            fd = (hi - lo) / (2 * eps)
            an = float(grads[t_idx][i])
            rel = abs(an - fd) / max(abs(fd), 1e-8)
            assert rel < 1e-4, (t_idx, i, an, fd)
    assert math.isfinite(float(h))
