"""Domain types, padding math, and the on-disk clip format."""

import math

import numpy as np
import pytest
import torch

from semcodec.core import (
    GRID_MULTIPLE,
    VALID_SCALES,
    Clip,
    Frame,
    PadRecord,
    RatePoint,
    ScaleSpec,
    bits_per_pixel,
    crop_from_grid,
    frame_from_uint8,
    frame_to_uint8,
    load_clip,
    pad_to_grid,
    read_manifest,
    save_clip,
    validate_clip,
    write_manifest,
)


def _rand_frame(h=32, w=48, t=0, seed=0):
    g = torch.Generator().manual_seed(seed)
    return Frame(torch.rand(3, h, w, generator=g), timestamp_index=t)


class TestFrame:
    def test_accessors(self):
        f = _rand_frame(40, 56, t=3)
        assert (f.height, f.width, f.timestamp_index) == (40, 56, 3)

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError):
            Frame(torch.rand(3, 8))

    def test_rejects_wrong_channels(self):
        with pytest.raises(ValueError):
            Frame(torch.rand(1, 8, 8))

    def test_rejects_negative_timestamp(self):
        with pytest.raises(ValueError):
            Frame(torch.rand(3, 8, 8), timestamp_index=-1)


class TestClip:
    def test_intra_positions(self):
        clip = Clip([_rand_frame(t=i) for i in range(7)], gop_size=3)
        intra = [clip.is_intra_position(i) for i in range(7)]
        assert intra == [True, False, False, True, False, False, True]

    def test_frames_coerced_to_tuple(self):
        clip = Clip([_rand_frame()], gop_size=1)
        assert isinstance(clip.frames, tuple)
        assert len(clip) == 1

    def test_rejects_nonpositive_gop(self):
        with pytest.raises(ValueError):
            Clip([_rand_frame()], gop_size=0)


def test_valid_scales_are_the_five_dyadic_levels():
    assert [float(s) for s in VALID_SCALES] == [1.0, 0.5, 0.25, 0.125, 0.0625]


def test_scale_spec_dims_ceil():
    spec = ScaleSpec(VALID_SCALES[2], channels=8)  # 1/4
    assert spec.dims(130, 64) == (33, 16)


def test_scale_spec_rejects_unknown_scale():
    from fractions import Fraction

    with pytest.raises(ValueError):
        ScaleSpec(Fraction(1, 3), channels=8)


def test_rate_point_rejects_negative_bpp():
    with pytest.raises(ValueError):
        RatePoint(bpp=-0.1, metric_name="x", metric_value=0.0)


class TestValidateClip:
    def test_clean_clip_passes(self):
        clip = Clip([_rand_frame(seed=i) for i in range(3)], gop_size=3)
        report = validate_clip(clip)
        assert report.ok and report.violations == ()

    def test_empty_clip(self):
        assert not validate_clip(Clip([], gop_size=1)).ok

    def test_dimension_mismatch(self):
        clip = Clip([_rand_frame(32, 48), _rand_frame(32, 40)], gop_size=2)
        report = validate_clip(clip)
        assert any("dimension mismatch" in v for v in report.violations)

    def test_out_of_range_pixels(self):
        bad = Frame(torch.full((3, 8, 8), 1.5))
        report = validate_clip(Clip([bad], gop_size=1))
        assert any("outside [0, 1]" in v for v in report.violations)

    def test_non_finite_pixels(self):
        px = torch.rand(3, 8, 8)
        px[0, 0, 0] = float("nan")
        report = validate_clip(Clip([Frame(px)], gop_size=1))
        assert any("non-finite" in v for v in report.violations)


def test_bits_per_pixel_exact():
    assert bits_per_pixel(1000, 10, 10, 1) == 10.0
    assert bits_per_pixel(0, 4, 4, 2) == 0.0
    with pytest.raises(ValueError):
        bits_per_pixel(8, 0, 4, 1)
    with pytest.raises(ValueError):
        bits_per_pixel(-1, 4, 4, 1)


class TestPadding:
    def test_already_aligned_is_identity(self):
        f = _rand_frame(64, 128)
        padded, rec = pad_to_grid(f)
        assert rec.is_zero
        assert padded is f

    def test_pad_and_crop_round_trip(self):
        f = _rand_frame(70, 50)
        padded, rec = pad_to_grid(f)
        assert padded.height % GRID_MULTIPLE == 0
        assert padded.width % GRID_MULTIPLE == 0
        assert (padded.height, padded.width) == (128, 64)
        assert rec == PadRecord(pad_bottom=58, pad_right=14)
        back = crop_from_grid(padded, rec)
        assert torch.equal(back.pixels, f.pixels)

    def test_padding_replicates_edges(self):
        f = _rand_frame(63, 64)
        padded, _ = pad_to_grid(f)
        assert torch.equal(padded.pixels[:, 63, :], f.pixels[:, 62, :])


class TestUint8Conversion:
    def test_round_half_up_on_255_grid(self):
        # 127.5/255 and 128.49/255 both land on 128; 127.49 stays at 127
        vals = torch.tensor([127.5, 128.49, 127.49, 0.0, 255.0]) / 255.0
        f = Frame(vals.reshape(1, 1, 5).repeat(3, 1, 1))
        out = frame_to_uint8(f)
        assert out.shape == (1, 5, 3)
        assert list(out[0, :, 0]) == [128, 128, 127, 0, 255]

    def test_frame_from_uint8_rejects_bad_shape(self):
        with pytest.raises(ValueError):
            frame_from_uint8(np.zeros((8, 8), dtype=np.uint8))

    def test_uint8_round_trip_is_lossless_on_the_grid(self):
        arr = np.arange(256, dtype=np.uint8).reshape(16, 16)
        arr = np.stack([arr, arr.T, arr[::-1]], axis=-1)
        f = frame_from_uint8(arr, timestamp_index=2)
        assert f.timestamp_index == 2
        assert np.array_equal(frame_to_uint8(f), arr)


class TestClipIO:
    def test_save_load_round_trip(self, tmp_path):
        clip = Clip([_rand_frame(seed=i, t=i) for i in range(4)], gop_size=2,
                    source_id="roundtrip")
        save_clip(clip, tmp_path / "c")
        names = sorted(p.name for p in (tmp_path / "c").glob("*.png"))
        assert names == ["000000.png", "000001.png", "000002.png", "000003.png"]
        back = load_clip(tmp_path / "c", gop_size=2)
        assert len(back) == 4
        for a, b in zip(clip.frames, back.frames):
            # quantized to the uint8 grid, so compare there
            assert np.array_equal(frame_to_uint8(a), frame_to_uint8(b))

    def test_load_clip_missing_dir(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(FileNotFoundError):
            load_clip(tmp_path / "empty", gop_size=2)

    def test_manifest_round_trip(self, tmp_path):
        rows = [("a", tmp_path / "a", 8, 64, 64), ("b", tmp_path / "b", 4, 32, 48)]
        path = write_manifest(rows, tmp_path / "manifest.jsonl")
        entries = read_manifest(path)
        assert [e["source_id"] for e in entries] == ["a", "b"]
        assert entries[1] == {
            "source_id": "b", "path": str(tmp_path / "b"),
            "frame_count": 4, "height": 32, "width": 48,
        }


def test_grid_multiple_covers_all_scales():
    # the padding grid must give integral dims at the deepest scale
    deepest = min(VALID_SCALES)
    assert math.isclose(float(GRID_MULTIPLE * deepest), 4.0)
