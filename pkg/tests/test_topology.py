import numpy as np
import pytest

from conftest import random_stacked_mask
from layerseg_lab.core.topology import (
    DefectConfig,
    boundaries_from_labels,
    boundaries_to_mask,
    check_stacked,
    mask_to_thickness,
    one_hot,
    simulate_defects,
    thickness_to_boundaries,
    unstacked_columns,
)
from layerseg_lab.errors import ShapeError, TopologyError


def _column(values):
    return np.array(values)[:, None]


class TestThicknessToBoundaries:
    def test_prefix_sum(self):
        b = thickness_to_boundaries(_column([2, 3, 0, 1]))
        assert b[:, 0].tolist() == [2, 5, 5, 6]

    def test_all_zero_column(self):
        assert np.all(thickness_to_boundaries(np.zeros((9, 4))) == 0)

    def test_default_shape(self, rng):
        assert thickness_to_boundaries(rng.random((9, 128))).shape == (9, 128)

    def test_negative_rejected(self):
        t = np.ones((3, 5))
        t[1, 3] = -0.5
        with pytest.raises(TopologyError) as info:
            thickness_to_boundaries(t)
        assert info.value.column == 3

    def test_ordering_holds_for_random_maps(self):
        rng = np.random.default_rng(7)
        for _ in range(10_000):
            t = rng.exponential(3.0, size=(9, 16)) * (rng.random((9, 16)) > 0.4)
            b = thickness_to_boundaries(t)
            assert np.all(np.diff(b, axis=0) >= 0)


class TestMaskToThickness:
    def test_toy_column(self):
        t = mask_to_thickness(_column([0, 0, 1, 1, 2, 3, 4, 4]), 5)
        assert t[:, 0].tolist() == [2, 2, 1, 1]

    def test_only_background(self):
        t = mask_to_thickness(_column([0] * 7 + [9]), 10)
        assert t[0, 0] == 7
        assert np.all(t[1:, 0] == 0)

    def test_column_sums(self, rng):
        mask = random_stacked_mask(rng, 10, 40, 12)
        t = mask_to_thickness(mask, 10)
        choroid = (mask == 9).sum(axis=0)
        np.testing.assert_array_equal(t.sum(axis=0) + choroid, np.full(12, 40))

    def test_unstacked_column_reported(self):
        mask = np.zeros((4, 3), dtype=int)
        mask[:, 1] = [0, 2, 1, 3]
        with pytest.raises(TopologyError) as info:
            mask_to_thickness(mask, 4)
        assert info.value.column == 1


class TestBoundariesToMask:
    def test_toy_column(self):
        mask = boundaries_to_mask(_column([2, 5, 5, 6]), 8)
        assert mask[:, 0].tolist() == [0, 0, 1, 1, 1, 3, 4, 4]

    def test_zero_boundaries(self):
        assert np.all(boundaries_to_mask(np.zeros((9, 3)), 5) == 9)

    def test_non_monotone_rejected(self):
        with pytest.raises(TopologyError):
            boundaries_to_mask(_column([2, 1]), 4)

    def test_round_trip(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            mask = random_stacked_mask(rng, 10, 32, 8)
            b = thickness_to_boundaries(mask_to_thickness(mask, 10))
            np.testing.assert_array_equal(boundaries_to_mask(b, 32), mask)


class TestOneHot:
    def test_contract(self, rng):
        mask = random_stacked_mask(rng, 10, 16, 16)
        oh = one_hot(mask, 10)
        assert oh.shape == (10, 16, 16)
        np.testing.assert_array_equal(oh.sum(axis=0), 1.0)
        np.testing.assert_array_equal(oh.argmax(axis=0), mask)

    def test_out_of_range(self):
        with pytest.raises(TopologyError):
            one_hot(np.array([[0, 3]]), 3)


class TestLabelReadout:
    def test_boundaries_from_stacked_labels(self, rng):
        mask = random_stacked_mask(rng, 10, 32, 8)
        expected = thickness_to_boundaries(mask_to_thickness(mask, 10))
        np.testing.assert_array_equal(boundaries_from_labels(mask, 10), expected)

    def test_unstacked_columns_counted(self):
        labels = np.array([[0, 0, 0], [2, 1, 1], [1, 2, 2]])
        assert unstacked_columns(labels) == 1
        with pytest.raises(TopologyError):
            check_stacked(labels)
        with pytest.raises(ShapeError):
            check_stacked(np.zeros(3))


class TestSimulateDefects:
    def _onehot(self, rng):
        mask = np.zeros((32, 6), dtype=int)
        mask[8:] = 1
        mask[12:] = 2
        mask[20:] = 3
        mask[26:] = 4
        return one_hot(mask, 5), mask

    def test_identity_config(self, rng):
        oh, mask = self._onehot(rng)
        out, moved = simulate_defects(oh, DefectConfig.identity(), rng)
        np.testing.assert_array_equal(out, oh)
        np.testing.assert_array_equal(moved, mask)

    def test_values_not_clamped(self, rng):
        oh, _ = self._onehot(rng)
        cfg = DefectConfig(ellipse_count=(3, 3), magnitude=(0.8, 1.0), gaussian_noise_sigma=0.0,
                           vertical_shift=(0, 0), dilate_shrink=(0, 0))
        out, _ = simulate_defects(oh, cfg, rng)
        assert out.max() > 1.0

    def test_negative_ellipse_zeroes_hit_channel(self, rng):
        oh, mask = self._onehot(rng)
        cfg = DefectConfig(ellipse_count=(1, 1), ellipse_axes=(4.0, 4.0), magnitude=(-1.0, -1.0),
                           ellipse_mode="single_channel", gaussian_noise_sigma=0.0,
                           vertical_shift=(0, 0), dilate_shrink=(0, 0))
        out, moved = simulate_defects(oh, cfg, rng)
        np.testing.assert_array_equal(moved, mask)
        delta = out - oh
        hit = [c for c in range(5) if np.any(delta[c] != 0)]
        assert len(hit) <= 1
        for c in hit:
            region = delta[c] == -1.0
            assert np.all(out[c][region & (oh[c] == 1)] == 0)

    def test_vertical_shift_moves_vitreous_only(self, rng):
        oh, mask = self._onehot(rng)
        cfg = DefectConfig.identity().model_copy(update={"vertical_shift": (3, 3)})
        _, moved = simulate_defects(oh, cfg, rng)
        before, after = mask_to_thickness(mask, 5), mask_to_thickness(moved, 5)
        np.testing.assert_array_equal(after[0], before[0] + 3)
        np.testing.assert_array_equal(after[1:], before[1:])

    def test_additive_corruption_keeps_target(self, rng):
        oh, mask = self._onehot(rng)
        cfg = DefectConfig(vertical_shift=(0, 0), dilate_shrink=(0, 0))
        _, moved = simulate_defects(oh, cfg, rng)
        np.testing.assert_array_equal(mask_to_thickness(moved, 5), mask_to_thickness(mask, 5))

    def test_dilation_keeps_targets_valid(self):
        rng = np.random.default_rng(5)
        cfg = DefectConfig(dilate_shrink=(-4, 4))
        for _ in range(50):
            mask = random_stacked_mask(rng, 5, 32, 6)
            _, moved = simulate_defects(one_hot(mask, 5), cfg, rng)
            assert np.all(mask_to_thickness(moved, 5) >= 0)

    def test_bad_ranges(self):
        with pytest.raises(ValueError):
            DefectConfig(magnitude=(-2.0, 1.0))
        with pytest.raises(ValueError):
            DefectConfig(vertical_shift=(4, -4))
