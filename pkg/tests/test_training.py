import math

import numpy as np
import pytest

from conftest import random_stacked_mask
from layerseg_lab.core.metrics import aggregate, signed_errors
from layerseg_lab.core.nets import NetConfig, rnet_forward, snet_forward
from layerseg_lab.core.phantom import PhantomConfig, generate_phantom
from layerseg_lab.core.run_storage import network_from_weights
from layerseg_lab.core.topology import DefectConfig, boundaries_from_labels, mask_to_thickness, thickness_to_boundaries
from layerseg_lab.core.training import (
    TrainSchedule,
    mean_thickness_bias,
    pixel_accuracy,
    thickness_mae,
    train_rnet,
    train_snet,
)
from layerseg_lab.engine.optim import OptimizerConfig
from layerseg_lab.engine.tensor import no_grad
from layerseg_lab.errors import ShapeError, TrainingError


def _samples(rng, cfg, count):
    samples = []
    for _ in range(count):
        mask = random_stacked_mask(rng, cfg.num_classes, cfg.patch_height, cfg.patch_width)
        image = (mask / (cfg.num_classes - 1.0))[None].astype(np.float32)
        samples.append((image, mask))
    return samples


def _same_weights(a, b):
    return set(a.params) == set(b.params) and all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


class TestTrainSnet:
    def test_same_seed_same_weights(self, tiny_config, rng):
        data = _samples(rng, tiny_config, 4)
        schedule = TrainSchedule(epochs=2, batch_size=2)
        first = train_snet(data, tiny_config, OptimizerConfig(), schedule, seed=3)
        second = train_snet(data, tiny_config, OptimizerConfig(), schedule, seed=3)
        assert _same_weights(first.weights, second.weights)
        assert first.losses == second.losses

    def test_initial_loss_near_uniform(self, small_config, rng):
        data = _samples(rng, small_config, 2)
        result = train_snet(data, small_config, OptimizerConfig(learning_rate=1e-8), TrainSchedule(epochs=1, batch_size=2))
        assert result.losses[0] == pytest.approx(math.log(10), rel=0.1)

    def test_loss_goes_down(self, tiny_config, rng):
        data = _samples(rng, tiny_config, 2)
        result = train_snet(data, tiny_config, OptimizerConfig(learning_rate=1e-2), TrainSchedule(epochs=60, batch_size=2))
        assert result.losses[-1] < 0.9 * result.losses[0]

    def test_best_checkpoint_by_validation(self, tiny_config, rng):
        data = _samples(rng, tiny_config, 3)
        result = train_snet(
            data, tiny_config, OptimizerConfig(learning_rate=1e-2), TrainSchedule(epochs=3), validation=data[:1]
        )
        best = max(e.val_metric for e in result.curve)
        assert result.weights.metadata["val_metric"] == best
        assert result.final_weights.metadata["epoch"] == 3
        net = network_from_weights(result.weights, expected_kind="snet")
        assert pixel_accuracy(net, data[:1]) == pytest.approx(best)

    def test_max_steps(self, tiny_config, rng):
        data = _samples(rng, tiny_config, 10)
        result = train_snet(data, tiny_config, OptimizerConfig(), TrainSchedule(epochs=5, batch_size=1, max_steps=3))
        assert result.final_weights.metadata["step_count"] == 3
        assert len(result.curve) == 1

    def test_cancel_after_first_epoch(self, tiny_config, rng):
        data = _samples(rng, tiny_config, 2)
        trainers, epochs = [], []

        def on_progress(epoch, kind, stats):
            epochs.append(epoch)
            trainers[0].cancel()

        result = train_snet(
            data, tiny_config, OptimizerConfig(), TrainSchedule(epochs=5), progress_callback=on_progress,
            trainer_hook=trainers.append,
        )
        assert result.cancelled
        assert epochs == [1]
        assert len(result.curve) == 1

    def test_non_finite_input_aborts_with_last_good(self, tiny_config, rng):
        data = _samples(rng, tiny_config, 3)
        data[1] = (np.full_like(data[1][0], np.nan), data[1][1])
        with pytest.raises(TrainingError) as info:
            train_snet(data, tiny_config, OptimizerConfig(), TrainSchedule(epochs=2, batch_size=1))
        assert info.value.last_good is not None
        assert info.value.last_good.metadata["epoch"] == 0
        assert info.value.curve == []

    def test_empty_dataset(self, tiny_config):
        with pytest.raises(ShapeError):
            train_snet([], tiny_config, OptimizerConfig(), TrainSchedule())

    @pytest.mark.slow
    def test_overfits_a_single_patch(self, tiny_config, rng):
        data = _samples(rng, tiny_config, 1)
        result = train_snet(data, tiny_config, OptimizerConfig(learning_rate=1e-2), TrainSchedule(epochs=1500, batch_size=1))
        assert result.losses[-1] < 0.05
        net = network_from_weights(result.final_weights)
        assert pixel_accuracy(net, data) >= 0.95


class TestTrainRnet:
    def test_readout_starts_at_mean_thickness(self, tiny_config, rng):
        masks = [m for _, m in _samples(rng, tiny_config, 4)]
        seen = []
        train_rnet(
            masks, tiny_config, DefectConfig.identity(), OptimizerConfig(), TrainSchedule(epochs=1),
            trainer_hook=lambda t: seen.append(t.net.params["dense.bias"].numpy()),
        )
        expected = np.mean([mask_to_thickness(m, 3) for m in masks], axis=0).reshape(-1)
        np.testing.assert_allclose(seen[0], expected, rtol=1e-6)
        np.testing.assert_allclose(mean_thickness_bias(masks, 3), expected)

    def test_deterministic_with_defects(self, tiny_config, rng):
        masks = [m for _, m in _samples(rng, tiny_config, 4)]
        defects = DefectConfig(vertical_shift=(-2, 2), dilate_shrink=(-1, 1))
        args = (masks, tiny_config, defects, OptimizerConfig(), TrainSchedule(epochs=2, batch_size=2))
        first, second = train_rnet(*args, seed=1), train_rnet(*args, seed=1)
        assert _same_weights(first.weights, second.weights)
        assert all(np.isfinite(first.losses))

    def test_clean_inputs_improve(self, tiny_config, rng):
        masks = [m for _, m in _samples(rng, tiny_config, 4)]
        result = train_rnet(
            masks, tiny_config, DefectConfig.identity(), OptimizerConfig(learning_rate=1e-3),
            TrainSchedule(epochs=30, batch_size=4), validation=masks,
        )
        first, last = result.curve[0].val_metric, min(e.val_metric for e in result.curve)
        assert last <= first
        net = network_from_weights(result.weights, expected_kind="rnet")
        assert thickness_mae(net, masks) == pytest.approx(last)

    def test_empty(self, tiny_config):
        with pytest.raises(ShapeError):
            train_rnet([], tiny_config, DefectConfig(), OptimizerConfig(), TrainSchedule())


DESK_PHANTOM = dict(
    height=24, width=8, num_layers=2, top_offset=5.0, top_variation=2.0,
    mean_thickness=[5.0, 5.0], variation=[2.0, 2.0], smoothness=8.0,
    pinch_probability=0.5, pinch_width=6.0, pinch_layers=[1],
    intensities=[0.1, 0.7, 0.4, 0.9], noise_sigma=0.02, speckle_sigma=0.05,
)
DESK_NET = NetConfig(
    patch_height=24, patch_width=8, num_classes=4, num_boundaries=3, base_channels=8, levels=1, rnet_head_channels=3
)


def _phantoms(cfg, count, seed):
    rng = np.random.default_rng(seed)
    return [generate_phantom(cfg, rng) for _ in range(count)]


def _segment(snet, rnet, image):
    with no_grad():
        return thickness_to_boundaries(rnet_forward(rnet, snet_forward(snet, image)).data)


@pytest.fixture(scope="module")
def desk():
    cfg = PhantomConfig(**DESK_PHANTOM)
    data = _phantoms(cfg, 500, 2024)
    train, val, test = data[:400], data[400:450], data[450:]
    opt = OptimizerConfig(learning_rate=3e-3)
    snet_result = train_snet(train, DESK_NET, opt, TrainSchedule(epochs=30, batch_size=8), seed=1, validation=val)
    defects = DefectConfig(
        ellipse_count=(0, 1), ellipse_axes=(1.0, 3.0), gaussian_noise_sigma=0.1, vertical_shift=(-2, 2), dilate_shrink=(-1, 1)
    )
    val_masks = [m for _, m in val]
    rnet_result = train_rnet(
        [m for _, m in train], DESK_NET, defects, opt, TrainSchedule(epochs=60, batch_size=8), seed=2, validation=val_masks
    )
    return {
        "cfg": cfg,
        "snet": network_from_weights(snet_result.weights),
        "rnet": network_from_weights(rnet_result.weights),
        "val_masks": val_masks,
        "test": test,
    }


@pytest.mark.slow
class TestDeskScale:
    def test_clean_validation_thickness_error(self, desk):
        assert thickness_mae(desk["rnet"], desk["val_masks"]) < 0.5

    def test_held_out_boundary_error(self, desk):
        pred = np.stack([_segment(desk["snet"], desk["rnet"], image) for image, _ in desk["test"]])
        truth = np.stack([boundaries_from_labels(mask, 4) for _, mask in desk["test"]])
        row = aggregate(signed_errors(pred, truth, resolution_um=1.0))
        assert row.mad <= 1.0
        assert abs(row.msd) <= 0.3

    def test_pinched_layer_stays_ordered_and_thin(self, desk):
        cfg = desk["cfg"].model_copy(update={"pinch_probability": 1.0})
        gaps, crossings = [], 0
        for image, mask in _phantoms(cfg, 20, 77):
            pred = _segment(desk["snet"], desk["rnet"], image)
            crossings += int((np.diff(pred, axis=0) < 0).sum())
            pinched = mask_to_thickness(mask, 4)[1] == 0
            gaps.extend((pred[1] - pred[0])[pinched])
        assert crossings == 0
        assert gaps
        assert max(gaps) < 1.0
