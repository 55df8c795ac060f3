import logging
from typing import Dict, Iterable, List, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ..errors import NonFiniteError
from .tensor import Parameter

logger = logging.getLogger(__name__)


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    method: Literal["sgd", "adam"] = "adam"
    learning_rate: float = Field(1e-3, gt=0)
    momentum: float = Field(0.0, ge=0, lt=1)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    epsilon: float = Field(1e-8, gt=0)


class Optimizer:
    def __init__(self, params: Iterable[Parameter], config: OptimizerConfig):
        self.params: List[Parameter] = list(params)
        self.config = config
        self.step_count = 0
        self._velocity: Dict[str, np.ndarray] = {}
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}
        logger.debug("%s over %d tensors, %d values", config.method, len(self.params), sum(p.data.size for p in self.params))

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def _check_finite(self) -> None:
        bad = [p.name for p in self.params if not np.isfinite(p.grad).all()]
        if bad:
            logger.warning("step %d: non-finite gradient in %s", self.step_count + 1, bad[0])
            raise NonFiniteError(
                f"optimizer step aborted: non-finite gradient in {len(bad)} parameter(s): {', '.join(bad[:5])}"
            )

    def step(self) -> None:
        self._check_finite()
        self.step_count += 1
        cfg = self.config
        for p in self.params:
            if cfg.method == "sgd":
                update = self._sgd_update(p)
            else:
                update = self._adam_update(p)
            p.assign(p.data - update)
        self.zero_grad()

    def _sgd_update(self, p: Parameter) -> np.ndarray:
        cfg = self.config
        if cfg.momentum == 0.0:
            return cfg.learning_rate * p.grad
        v = self._velocity.get(p.name)
        v = p.grad.copy() if v is None else cfg.momentum * v + p.grad
        self._velocity[p.name] = v
        return cfg.learning_rate * v

    def _adam_update(self, p: Parameter) -> np.ndarray:
        cfg = self.config
        g = p.grad
        m = self._m.get(p.name)
        v = self._v.get(p.name)
        m = (1 - cfg.beta1) * g if m is None else cfg.beta1 * m + (1 - cfg.beta1) * g
        v = (1 - cfg.beta2) * g * g if v is None else cfg.beta2 * v + (1 - cfg.beta2) * g * g
        self._m[p.name] = m
        self._v[p.name] = v
        m_hat = m / (1 - cfg.beta1 ** self.step_count)
        v_hat = v / (1 - cfg.beta2 ** self.step_count)
        return cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
