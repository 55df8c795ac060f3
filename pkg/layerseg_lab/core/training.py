import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ..engine import ops
from ..engine.optim import Optimizer, OptimizerConfig
from ..engine.tensor import backward, no_grad
from ..errors import NonFiniteError, ShapeError, TrainingError
from .nets import NetConfig, Network, build_rnet, build_snet, rnet_forward, snet_forward
from .run_storage import WeightStore, weights_from_network
from .topology import DefectConfig, mask_to_thickness, one_hot, simulate_defects

logger = logging.getLogger(__name__)

Sample = Tuple[np.ndarray, np.ndarray]


class TrainSchedule(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(20, gt=0)
    batch_size: int = Field(4, gt=0)
    max_steps: Optional[int] = Field(None, gt=0)
    shuffle: bool = True


@dataclass
class EpochStats:
    epoch: int
    steps: int
    train_loss: float
    val_metric: Optional[float] = None
    elapsed: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    weights: WeightStore
    final_weights: WeightStore
    curve: List[EpochStats] = field(default_factory=list)
    cancelled: bool = False

    @property
    def losses(self) -> List[float]:
        return [e.train_loss for e in self.curve]


class Trainer:
    """Minibatch loop shared by both networks.

    ``step_loss(index, rng)`` returns the per-element mean loss of one sample;
    ``validate()`` returns the validation metric or None.
    """

    def __init__(
        self,
        net: Network,
        optimizer_config: OptimizerConfig,
        schedule: TrainSchedule,
        seed: int,
        progress_callback: Optional[Callable] = None,
    ):
        self.net = net
        self.optimizer = Optimizer(net.parameters(), optimizer_config)
        self.schedule = schedule
        self.seed = seed
        self.progress_callback = progress_callback
        self._is_cancelled = False

    def cancel(self):
        self._is_cancelled = True

    def reset_cancel(self):
        self._is_cancelled = False

    def _snapshot(self, **extra) -> WeightStore:
        return weights_from_network(self.net, self.seed, self.optimizer.step_count, **extra)

    def fit(
        self,
        count: int,
        step_loss: Callable[[int, np.random.Generator], ops.Loss],
        validate: Callable[[], Optional[float]],
        higher_is_better: bool,
        rng: np.random.Generator,
    ) -> TrainResult:
        if count == 0:
            raise ShapeError("training set is empty")
        self.reset_cancel()
        schedule = self.schedule
        order_rng = np.random.default_rng(self.seed)
        curve: List[EpochStats] = []
        best: Optional[WeightStore] = None
        best_metric: Optional[float] = None
        last_good = self._snapshot(epoch=0)
        started = time.perf_counter()

        for epoch in range(1, schedule.epochs + 1):
            if self._is_cancelled:
                break
            order = order_rng.permutation(count) if schedule.shuffle else np.arange(count)
            total, seen = 0.0, 0
            for first in range(0, count, schedule.batch_size):
                batch = order[first:first + schedule.batch_size]
                try:
                    for index in batch:
                        loss = step_loss(int(index), rng)
                        backward(ops.scale(loss.mean, 1.0 / len(batch)))
                        total += loss.mean.item()
                        seen += 1
                    self.optimizer.step()
                except NonFiniteError as e:
                    raise TrainingError(
                        f"epoch {epoch}, step {self.optimizer.step_count + 1}: {e}",
                        last_good=best or last_good,
                        curve=curve,
                    ) from e
                if schedule.max_steps and self.optimizer.step_count >= schedule.max_steps:
                    break
                if self._is_cancelled:
                    break

            metric = validate()
            stats = EpochStats(
                epoch=epoch,
                steps=self.optimizer.step_count,
                train_loss=total / max(seen, 1),
                val_metric=metric,
                elapsed=time.perf_counter() - started,
            )
            curve.append(stats)
            logger.info(
                "%s epoch %d: loss %.5f, validation %s",
                self.net.kind, epoch, stats.train_loss, "n/a" if metric is None else f"{metric:.5f}",
            )
            if self.progress_callback:
                self.progress_callback(epoch, "epoch", stats)

            last_good = self._snapshot(epoch=epoch)
            improved = metric is not None and (
                best_metric is None or (metric > best_metric if higher_is_better else metric < best_metric)
            )
            if improved:
                best_metric = metric
                best = self._snapshot(epoch=epoch, val_metric=metric)
            if schedule.max_steps and self.optimizer.step_count >= schedule.max_steps:
                break

        return TrainResult(
            weights=best or last_good,
            final_weights=last_good,
            curve=curve,
            cancelled=self._is_cancelled,
        )


def pixel_accuracy(net: Network, samples: Sequence[Sample]) -> float:
    correct, total = 0, 0
    with no_grad():
        for image, mask in samples:
            labels = snet_forward(net, image).data.argmax(axis=0)
            correct += int((labels == mask).sum())
            total += mask.size
    return correct / max(total, 1)


def thickness_mae(net: Network, masks: Sequence[np.ndarray]) -> float:
    """Mean |predicted - true| thickness in pixels on clean one-hot inputs."""
    c = net.config.num_classes
    errors = []
    with no_grad():
        for mask in masks:
            pred = rnet_forward(net, one_hot(mask, c)).data
            errors.append(np.abs(pred - mask_to_thickness(mask, c)).mean())
    return float(np.mean(errors)) if errors else 0.0


def train_snet(
    dataset: Sequence[Sample],
    net_config: NetConfig,
    optimizer_config: OptimizerConfig,
    schedule: TrainSchedule,
    seed: int = 0,
    validation: Optional[Sequence[Sample]] = None,
    progress_callback: Optional[Callable] = None,
    trainer_hook: Optional[Callable[[Trainer], None]] = None,
) -> TrainResult:
    net = build_snet(net_config, seed)
    trainer = Trainer(net, optimizer_config, schedule, seed, progress_callback)
    if trainer_hook:
        trainer_hook(trainer)

    def step_loss(index: int, rng: np.random.Generator) -> ops.Loss:
        image, mask = dataset[index]
        return ops.cross_entropy_loss(snet_forward(net, image), mask)

    def validate() -> Optional[float]:
        return pixel_accuracy(net, validation) if validation else None

    return trainer.fit(len(dataset), step_loss, validate, True, np.random.default_rng(seed))


def mean_thickness_bias(masks: Sequence[np.ndarray], num_classes: int) -> np.ndarray:
    return np.mean([mask_to_thickness(m, num_classes) for m in masks], axis=0).reshape(-1)


def train_rnet(
    masks: Sequence[np.ndarray],
    net_config: NetConfig,
    defect_config: DefectConfig,
    optimizer_config: OptimizerConfig,
    schedule: TrainSchedule,
    seed: int = 0,
    validation: Optional[Sequence[np.ndarray]] = None,
    progress_callback: Optional[Callable] = None,
    trainer_hook: Optional[Callable[[Trainer], None]] = None,
) -> TrainResult:
    c = net_config.num_classes
    net = build_rnet(net_config, seed)
    if masks:
        # start the readout at the average training thickness per column
        net.params["dense.bias"].assign(mean_thickness_bias(masks, c))
    trainer = Trainer(net, optimizer_config, schedule, seed, progress_callback)
    if trainer_hook:
        trainer_hook(trainer)
    onehots: Dict[int, np.ndarray] = {}

    def step_loss(index: int, rng: np.random.Generator) -> ops.Loss:
        if index not in onehots:
            onehots[index] = one_hot(masks[index], c)
        corrupted, moved = simulate_defects(onehots[index], defect_config, rng)
        target = mask_to_thickness(moved, c)
        return ops.mse_loss(rnet_forward(net, corrupted), target)

    def validate() -> Optional[float]:
        return thickness_mae(net, validation) if validation else None

    defect_rng = np.random.default_rng([seed, defect_config.seed])
    return trainer.fit(len(masks), step_loss, validate, False, defect_rng)
