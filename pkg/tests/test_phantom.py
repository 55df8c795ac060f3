import numpy as np
import pytest
from pydantic import ValidationError

from layerseg_lab.core.phantom import (
    VOLUME_DEFAULTS,
    PhantomConfig,
    generate_dataset,
    generate_phantom,
    generate_volume,
    sample_thickness,
)
from layerseg_lab.core.run_storage import load_dataset, read_manifest
from layerseg_lab.core.topology import check_stacked, mask_to_thickness, thickness_to_boundaries


class TestPhantomConfig:
    def test_defaults_fit_the_patch(self):
        cfg = PhantomConfig()
        assert cfg.num_classes == 10
        assert (cfg.height, cfg.width) == (128, 128)

    def test_volume_defaults_fit_the_scan(self):
        cfg = PhantomConfig(**VOLUME_DEFAULTS)
        assert (cfg.height, cfg.width) == (496, 1024)

    def test_retina_too_deep(self):
        with pytest.raises(ValidationError, match="beyond"):
            PhantomConfig(height=64)

    def test_wrong_intensity_count(self):
        with pytest.raises(ValidationError, match="intensities"):
            PhantomConfig(intensities=[0.5] * 9)

    def test_pinch_layer_range(self):
        with pytest.raises(ValidationError):
            PhantomConfig(pinch_layers=[0])


class TestGeneratePhantom:
    def test_shapes_and_range(self, rng):
        image, mask = generate_phantom(PhantomConfig(), rng)
        assert image.shape == (1, 128, 128)
        assert image.dtype == np.float32
        assert mask.shape == (128, 128)
        assert 0.0 <= image.min() and image.max() <= 1.0

    def test_masks_are_stacked(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            _, mask = generate_phantom(PhantomConfig(), rng)
            check_stacked(mask)
            assert mask.min() >= 0 and mask.max() <= 9

    def test_column_thickness_sums(self, rng):
        _, mask = generate_phantom(PhantomConfig(), rng)
        t = mask_to_thickness(mask, 10)
        choroid = (mask == 9).sum(axis=0)
        np.testing.assert_array_equal(t.sum(axis=0) + choroid, np.full(128, 128))

    def test_pinch_gives_coincident_boundaries(self, rng):
        cfg = PhantomConfig(pinch_probability=1.0, pinch_layers=[1])
        _, mask = generate_phantom(cfg, rng)
        b = thickness_to_boundaries(mask_to_thickness(mask, 10))
        assert np.any(b[1] == b[0])

    def test_no_pinch_keeps_layers_present(self, rng):
        cfg = PhantomConfig(pinch_probability=0.0)
        t = sample_thickness(cfg, rng)
        assert t.shape == (9, 128)
        assert np.all(t[1:] > 0)

    def test_noise_free_image_is_piecewise_constant(self, rng):
        cfg = PhantomConfig(noise_sigma=0.0, speckle_sigma=0.0)
        image, mask = generate_phantom(cfg, rng)
        expected = np.asarray(cfg.intensities, dtype=np.float32)[mask]
        np.testing.assert_array_equal(image[0], expected)

    def test_layer_means_match_configured_intensities(self):
        cfg = PhantomConfig()
        image, mask = generate_phantom(cfg, np.random.default_rng(13))
        for k, mean in enumerate(cfg.intensities):
            pixels = image[0][mask == k].astype(np.float64)
            if pixels.size < 2:
                continue
            tolerance = 3 * pixels.std() / np.sqrt(pixels.size)
            assert abs(pixels.mean() - mean) <= tolerance, f"class {k}"

    def test_same_seed_same_phantom(self):
        a = generate_phantom(PhantomConfig(), np.random.default_rng(9))
        b = generate_phantom(PhantomConfig(), np.random.default_rng(9))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])


class TestGenerateVolume:
    def test_shapes(self, rng):
        cfg = PhantomConfig(height=160, width=48, top_offset=40.0, top_variation=5.0)
        images, truth = generate_volume(cfg, 3, rng)
        assert images.shape == (3, 160, 48)
        assert truth.shape == (3, 9, 48)
        assert np.all(np.diff(truth, axis=1) >= 0)

    def test_empty(self, rng):
        images, truth = generate_volume(PhantomConfig(), 0, rng)
        assert images.shape == (0, 128, 128)
        assert truth.shape == (0, 9, 128)


class TestGenerateDataset:
    def test_deterministic(self, tmp_path):
        cfg = PhantomConfig()
        generate_dataset(cfg, 4, seed=5, out_dir=tmp_path / "a")
        generate_dataset(cfg, 4, seed=5, out_dir=tmp_path / "b", threads=3)
        items_a, manifest_a = load_dataset(tmp_path / "a")
        items_b, manifest_b = load_dataset(tmp_path / "b")
        assert manifest_a.items == manifest_b.items
        for (image_a, mask_a), (image_b, mask_b) in zip(items_a, items_b):
            np.testing.assert_array_equal(image_a, image_b)
            np.testing.assert_array_equal(mask_a, mask_b)

    def test_items_differ(self, tmp_path):
        generate_dataset(PhantomConfig(), 2, seed=1, out_dir=tmp_path)
        (first, _), (second, _) = load_dataset(tmp_path)[0]
        assert not np.array_equal(first, second)

    def test_manifest_contents(self, tmp_path):
        cfg = PhantomConfig()
        generate_dataset(cfg, 3, seed=2, out_dir=tmp_path, extra={"command": "gen-data"})
        data = read_manifest(tmp_path)
        assert data["count"] == 3
        assert data["command"] == "gen-data"
        assert len(data["items"]) == 3
        assert len(data["config_hash"]) == 64

    def test_zero_count(self, tmp_path):
        manifest = generate_dataset(PhantomConfig(), 0, seed=0, out_dir=tmp_path)
        assert manifest.count == 0
        items, _ = load_dataset(tmp_path)
        assert items == []

    def test_negative_count(self, tmp_path):
        with pytest.raises(ValueError):
            generate_dataset(PhantomConfig(), -1, seed=0, out_dir=tmp_path)
