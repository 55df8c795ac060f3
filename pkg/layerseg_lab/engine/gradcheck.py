"""Central finite-difference audit of the engine's gradients.

Every check runs in 64-bit mode. An instance whose forward pass comes within
``margin`` of a ReLU kink or a max-pool tie is redrawn, since the derivative
is not defined there and finite differences straddle the kink.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import BackwardError
from . import ops
from .tensor import Parameter, Tensor, backward, kink_monitor, no_grad, precision

logger = logging.getLogger(__name__)

STEP = 1e-5
TOLERANCE = 1e-5
# gradient norms below this are compared in absolute terms
NORM_FLOOR = 1e-3

Builder = Callable[[np.random.Generator], Tuple[List[Parameter], Callable[[], Tensor]]]


@dataclass
class CheckResult:
    name: str
    max_rel_error: float = 0.0
    instances: int = 0
    redrawn: int = 0
    per_param: Dict[str, float] = field(default_factory=dict)
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.instances > 0 and self.max_rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = float(np.linalg.norm(analytic - numeric))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), NORM_FLOOR)
    return diff / scale


def _sample_coords(size: int, count: int, rng: np.random.Generator) -> np.ndarray:
    if size <= count:
        return np.arange(size)
    return np.sort(rng.choice(size, size=count, replace=False))


def numeric_gradient(
    objective: Callable[[], float], param: Parameter, coords: np.ndarray, step: float = STEP
) -> np.ndarray:
    base = param.numpy()
    flat = base.reshape(-1)
    out = np.empty(coords.size)
    for i, idx in enumerate(coords):
        original = flat[idx]
        flat[idx] = original + step
        param.assign(base)
        plus = objective()
        flat[idx] = original - step
        param.assign(base)
        minus = objective()
        flat[idx] = original
        out[i] = (plus - minus) / (2.0 * step)
    param.assign(base)
    return out


def _draw(build: Builder, rng: np.random.Generator, margin: float, max_draws: int):
    for attempt in range(max_draws):
        params, f = build(rng)
        with kink_monitor() as monitor:
            out = f()
        if monitor.margin >= margin:
            return params, f, out, attempt
    raise BackwardError(f"no instance clear of non-differentiable points after {max_draws} draws")


def check(
    name: str,
    build: Builder,
    instances: int = 100,
    seed: int = 0,
    coords: int = 32,
    step: float = STEP,
    tolerance: float = TOLERANCE,
    max_draws: int = 50,
) -> CheckResult:
    """Compare backward() against central differences of a random projection of f."""
    rng = np.random.default_rng(seed)
    result = CheckResult(name=name, tolerance=tolerance)
    margin = 10.0 * step
    with precision(64):
        for _ in range(instances):
            params, f, out, redrawn = _draw(build, rng, margin, max_draws)
            result.redrawn += redrawn
            weights = rng.standard_normal(out.shape)
            for p in params:
                p.zero_grad()
            backward(ops.weighted_sum(out, weights))

            def objective() -> float:
                with no_grad():
                    return ops.weighted_sum(f(), weights).item()

            for p in params:
                idx = _sample_coords(p.size, coords, rng)
                analytic = p.grad.reshape(-1)[idx].copy()
                numeric = numeric_gradient(objective, p, idx, step)
                err = relative_error(analytic, numeric)
                result.per_param[p.name] = max(result.per_param.get(p.name, 0.0), err)
                result.max_rel_error = max(result.max_rel_error, err)
            result.instances += 1
    logger.debug("%s: max relative error %.3e over %d instances", name, result.max_rel_error, result.instances)
    return result


def _params(rng: np.random.Generator, **shapes: Tuple[int, ...]) -> Dict[str, Parameter]:
    return {name: Parameter(name, rng.standard_normal(shape)) for name, shape in shapes.items()}


def _conv(k: int) -> Builder:
    def build(rng):
        p = _params(rng, x=(2, 6, 5), w=(3, 2, k, k), b=(3,))
        return list(p.values()), lambda: ops.conv2d(p["x"], p["w"], p["b"])
    return build


def _unary(op: Callable[[Tensor], Tensor], shape: Tuple[int, ...]) -> Builder:
    def build(rng):
        p = _params(rng, x=shape)
        return [p["x"]], lambda: op(p["x"])
    return build


def _concat(rng):
    p = _params(rng, a=(2, 4, 4), b=(3, 4, 4))
    return list(p.values()), lambda: ops.concat_channels(p["a"], p["b"])


def _dense(rng):
    p = _params(rng, x=(6,), w=(4, 6), b=(4,))
    return list(p.values()), lambda: ops.dense(p["x"], p["w"], p["b"])


def _cross_entropy(rng):
    p = _params(rng, logits=(4, 3, 3))
    labels = rng.integers(0, 4, size=(3, 3))
    return [p["logits"]], lambda: ops.cross_entropy_loss(ops.softmax_over_classes(p["logits"]), labels).total


def _cross_entropy_probs(rng):
    probs = Parameter("probs", rng.uniform(0.1, 1.0, size=(4, 3, 3)))
    labels = rng.integers(0, 4, size=(3, 3))
    return [probs], lambda: ops.cross_entropy_loss(probs, labels).total


def _mse(rng):
    p = _params(rng, pred=(3, 5))
    target = rng.standard_normal((3, 5))
    return [p["pred"]], lambda: ops.mse_loss(p["pred"], target).total


def reduced_net_config():
    from ..core.nets import NetConfig

    return NetConfig(
        patch_height=8, patch_width=8, num_classes=3, num_boundaries=2, base_channels=2, levels=1, rnet_head_channels=2
    )


def _snet(rng):
    from ..core.nets import build_snet, snet_forward

    net = build_snet(reduced_net_config(), seed=int(rng.integers(2**31)))
    x = rng.standard_normal((1, 8, 8))
    return net.parameters(), lambda: snet_forward(net, x)


def _rnet(rng):
    from ..core.nets import build_rnet, rnet_forward

    net = build_rnet(reduced_net_config(), seed=int(rng.integers(2**31)))
    # shift the readout so its final ReLU is mostly active
    net.params["dense.bias"].assign(np.full(net.params["dense.bias"].shape, 2.0))
    probs = rng.dirichlet(np.ones(3), size=(8, 8)).transpose(2, 0, 1)
    return net.parameters(), lambda: rnet_forward(net, probs)


def _cascade(rng):
    from ..core.nets import build_rnet, build_snet, rnet_forward, snet_forward

    cfg = reduced_net_config()
    snet = build_snet(cfg, seed=int(rng.integers(2**31)))
    rnet = build_rnet(cfg, seed=int(rng.integers(2**31)))
    rnet.params["dense.bias"].assign(np.full(rnet.params["dense.bias"].shape, 2.0))
    x = rng.standard_normal((1, 8, 8))
    return snet.parameters() + rnet.parameters(), lambda: rnet_forward(rnet, snet_forward(snet, x))


CHECKS: Dict[str, Builder] = {
    "conv2d_3x3": _conv(3),
    "conv2d_1x1": _conv(1),
    "maxpool2x2": _unary(lambda x: ops.maxpool2x2(x)[0], (2, 4, 6)),
    "upsample2x2": _unary(ops.upsample2x2, (2, 3, 2)),
    "relu": _unary(ops.relu, (3, 4)),
    "concat_channels": _concat,
    "reshape": _unary(lambda x: ops.reshape(x, (x.size,)), (2, 3, 2)),
    "dense": _dense,
    "softmax_over_classes": _unary(ops.softmax_over_classes, (4, 3, 2)),
    "scale": _unary(lambda x: ops.scale(x, -1.5), (5,)),
    "cross_entropy_loss": _cross_entropy,
    "cross_entropy_loss_probs": _cross_entropy_probs,
    "mse_loss": _mse,
    "snet_reduced": _snet,
    "rnet_reduced": _rnet,
    "snet_rnet_reduced": _cascade,
}


def audit(
    instances: int = 100,
    seed: int = 0,
    coords: int = 32,
    names: Optional[Sequence[str]] = None,
    tolerance: float = TOLERANCE,
) -> List[CheckResult]:
    selected = list(names) if names else list(CHECKS)
    unknown = [n for n in selected if n not in CHECKS]
    if unknown:
        raise ValueError(f"unknown gradient checks: {', '.join(unknown)}")
    results = []
    for offset, name in enumerate(selected):
        results.append(check(name, CHECKS[name], instances, seed + offset, coords, tolerance=tolerance))
    return results
