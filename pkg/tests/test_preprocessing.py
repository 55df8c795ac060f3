import logging

import numpy as np
import pytest
from pydantic import ValidationError

from layerseg_lab.core.preprocessing import (
    PatchLayout,
    PipelineConfig,
    estimate_baseline,
    extract_patches,
    flatten_and_crop,
    stitch,
    unflatten_image,
)
from layerseg_lab.errors import ShapeError


def _line_image(height, rows):
    image = np.zeros((height, len(rows)), dtype=np.float32)
    image[np.asarray(rows), np.arange(len(rows))] = 1.0
    return image


class TestBaseline:
    def test_single_bright_row(self):
        image = np.zeros((64, 32))
        image[40] = 1.0
        np.testing.assert_allclose(estimate_baseline(image), 40.0)

    def test_accepts_channel_axis(self):
        image = np.zeros((1, 64, 32))
        image[0, 21] = 0.7
        np.testing.assert_allclose(estimate_baseline(image), 21.0)

    def test_band_centroid(self):
        image = np.zeros((64, 16))
        image[30:33] = 1.0
        np.testing.assert_allclose(estimate_baseline(image), 31.0)

    def test_constant_image_falls_back_to_middle(self, caplog):
        with caplog.at_level(logging.WARNING):
            baseline = estimate_baseline(np.full((50, 8), 0.3))
        np.testing.assert_array_equal(baseline, np.full(8, 25.0))
        assert "no bright band" in caplog.text

    def test_blank_columns_interpolated(self):
        image = np.zeros((64, 40))
        image[20, :10] = 1.0
        image[20, 30:] = 1.0
        cfg = PipelineConfig(smoothing_window=1, median_window=1)
        np.testing.assert_allclose(estimate_baseline(image, cfg), 20.0)


class TestFlatten:
    def test_default_crop_shape(self, rng):
        bscan = rng.random((496, 1024)).astype(np.float32)
        flat, record = flatten_and_crop(bscan, np.full(1024, 300.0))
        assert flat.shape == (1, 128, 1024)
        assert record.original_height == 496

    def test_flat_baseline_needs_no_shifts(self):
        image = _line_image(128, [60] * 16)
        flat, record = flatten_and_crop(image, np.full(16, 60.0), PipelineConfig(crop_height=64, target_row=40))
        assert np.all(record.shifts == 0)
        assert record.crop_top == 20
        np.testing.assert_array_equal(flat[0], image[20:84])

    def test_tilted_line_is_flattened(self):
        baseline = 30 + np.arange(32) // 4
        image = _line_image(128, baseline)
        cfg = PipelineConfig(crop_height=64, target_row=40)
        flat, record = flatten_and_crop(image, baseline.astype(float), cfg)
        np.testing.assert_array_equal(flat[0, 40], np.ones(32))
        assert flat[0].sum() == 32
        np.testing.assert_array_equal(record.to_original_rows(np.full(32, 40.0)), baseline)

    def test_unflatten_restores_cropped_pixels(self):
        baseline = 50 + (np.arange(24) % 5)
        image = _line_image(128, baseline) + _line_image(128, baseline + 10)
        flat, record = flatten_and_crop(image, baseline.astype(float), PipelineConfig(crop_height=64, target_row=30))
        np.testing.assert_array_equal(unflatten_image(flat, record), image)

    def test_rows_outside_the_source_are_zero(self):
        image = np.ones((40, 8), dtype=np.float32)
        flat, _ = flatten_and_crop(image, np.full(8, 5.0), PipelineConfig(crop_height=64, target_row=40))
        assert np.all(flat[0, :35] == 0)
        assert np.all(flat[0, 35:] == 1)

    def test_baseline_length_mismatch(self):
        with pytest.raises(ShapeError):
            flatten_and_crop(np.zeros((64, 16)), np.zeros(15))


class TestPatchLayout:
    def test_default_starts(self):
        layout = PatchLayout.for_width(1024)
        assert layout.count == 20
        assert layout.starts[:3] == (0, 47, 94)
        assert layout.starts[-1] == 896

    def test_single_patch(self):
        assert PatchLayout.for_width(128, count=1).starts == (0,)

    def test_single_patch_cannot_cover(self):
        with pytest.raises(ShapeError, match="uncovered"):
            PatchLayout.for_width(300, count=1)

    def test_too_narrow(self):
        with pytest.raises(ShapeError):
            PatchLayout.for_width(100)

    def test_repeated_starts_collapse(self):
        layout = PatchLayout.for_width(130, count=20)
        assert layout.starts == (0, 1, 2)

    def test_extract(self, rng):
        image = rng.random((1, 128, 1024))
        patches = extract_patches(image, PatchLayout.for_width(1024))
        assert len(patches) == 20
        start, patch = patches[1]
        assert patch.shape == (1, 128, 128)
        np.testing.assert_array_equal(patch, image[:, :, start:start + 128])

    def test_bad_config(self):
        with pytest.raises(ValidationError):
            PipelineConfig(patch_count=0)


class TestStitch:
    def test_identity_for_one_patch(self, rng):
        t = rng.random((9, 32))
        np.testing.assert_allclose(stitch([(0, t)], 32), t)

    def test_overlap_is_averaged(self):
        out = stitch([(0, np.full((2, 6), 2.0)), (4, np.full((2, 6), 4.0))], 10)
        np.testing.assert_allclose(out[:, :4], 2.0)
        np.testing.assert_allclose(out[:, 4:6], 3.0)
        np.testing.assert_allclose(out[:, 6:], 4.0)

    def test_center_weighting_keeps_constants(self):
        patches = [(s, np.full((3, 8), 5.0)) for s in (0, 3, 8)]
        np.testing.assert_allclose(stitch(patches, 16, weighting="center"), 5.0)

    def test_probability_maps(self, rng):
        p = rng.random((10, 16, 8))
        out = stitch([(0, p), (8, p)], 16)
        assert out.shape == (10, 16, 16)

    def test_gap(self):
        with pytest.raises(ShapeError, match="uncovered"):
            stitch([(0, np.ones((1, 4))), (6, np.ones((1, 4)))], 10)

    def test_out_of_range(self):
        with pytest.raises(ShapeError):
            stitch([(8, np.ones((1, 4)))], 10)

    def test_empty(self):
        with pytest.raises(ShapeError):
            stitch([], 10)
