import logging
from dataclasses import dataclass
from typing import Dict, List, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..engine import ops
from ..engine.tensor import Parameter, Tensor, default_dtype
from ..errors import CompatibilityError, ConfigError, ShapeError

logger = logging.getLogger(__name__)

NetKind = Literal["snet", "rnet"]
# small logits at start, so the first loss sits near ln(num_classes)
SNET_HEAD_GAIN = 0.1


class NetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    patch_height: int = Field(128, gt=0)
    patch_width: int = Field(128, gt=0)
    num_classes: int = Field(10, ge=2)
    num_boundaries: int = Field(9, ge=1)
    base_channels: int = Field(16, gt=0)
    levels: int = Field(4, ge=0)
    rnet_head_channels: int = Field(9, gt=0)

    @model_validator(mode="after")
    def _check_extents(self) -> "NetConfig":
        step = 2 ** self.levels
        if self.patch_height % step or self.patch_width % step:
            raise ValueError(
                f"patch {self.patch_height}x{self.patch_width} is not divisible by 2^levels = {step}"
            )
        if self.num_boundaries != self.num_classes - 1:
            raise ValueError(
                f"num_boundaries ({self.num_boundaries}) must equal num_classes - 1 ({self.num_classes - 1})"
            )
        return self


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0


class Network:
    def __init__(self, kind: NetKind, config: NetConfig, layers: List[LayerSpec], params: Dict[str, Parameter]):
        self.kind = kind
        self.config = config
        self.layers = layers
        self.params = params

    @property
    def in_channels(self) -> int:
        return 1 if self.kind == "snet" else self.config.num_classes

    def parameters(self) -> List[Parameter]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def count_layers(self, kind: str) -> int:
        return sum(1 for layer in self.layers if layer.kind == kind)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def check_input(self, x: Tensor) -> None:
        expected = (self.in_channels, self.config.patch_height, self.config.patch_width)
        if tuple(x.shape) != expected:
            raise ShapeError(f"{self.kind} expects input of shape {expected}, got {tuple(x.shape)}")

    def forward(self, x: Tensor) -> Tensor:
        self.check_input(x)
        skips: List[Tensor] = []
        for layer in self.layers:
            if layer.kind == "conv":
                x = ops.conv2d(x, self.params[f"{layer.name}.weight"], self.params[f"{layer.name}.bias"])
            elif layer.kind == "relu":
                x = ops.relu(x)
            elif layer.kind == "pool":
                skips.append(x)
                x, _ = ops.maxpool2x2(x)
            elif layer.kind == "upsample":
                x = ops.upsample2x2(x)
            elif layer.kind == "concat":
                x = ops.concat_channels(skips.pop(), x)
            elif layer.kind == "flatten":
                x = ops.reshape(x, (x.size,))
            elif layer.kind == "dense":
                x = ops.dense(x, self.params[f"{layer.name}.weight"], self.params[f"{layer.name}.bias"])
            else:
                raise ValueError(f"unknown layer kind {layer.kind!r}")
        return x

    def state(self) -> Dict[str, np.ndarray]:
        return {name: p.numpy() for name, p in self.params.items()}

    def load_state(self, arrays: Dict[str, np.ndarray]) -> None:
        missing = sorted(set(self.params) - set(arrays))
        unexpected = sorted(set(arrays) - set(self.params))
        if missing or unexpected:
            raise CompatibilityError(
                f"{self.kind} weights do not match the architecture "
                f"(missing: {missing[:3]}, unexpected: {unexpected[:3]})"
            )
        for name, p in self.params.items():
            if tuple(arrays[name].shape) != p.shape:
                raise CompatibilityError(f"{name}: stored shape {arrays[name].shape} != {p.shape}")
        for name, p in self.params.items():
            p.assign(arrays[name])
            p.zero_grad()


def _validated(config: NetConfig) -> NetConfig:
    try:
        return NetConfig.model_validate(config.model_dump())
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def _double_conv(prefix: str, in_channels: int, out_channels: int) -> List[LayerSpec]:
    return [
        LayerSpec("conv", f"{prefix}.conv1", in_channels, out_channels, 3),
        LayerSpec("relu", f"{prefix}.relu1"),
        LayerSpec("conv", f"{prefix}.conv2", out_channels, out_channels, 3),
        LayerSpec("relu", f"{prefix}.relu2"),
    ]


def _unet_layers(config: NetConfig, in_channels: int, out_channels: int) -> List[LayerSpec]:
    base = config.base_channels
    layers: List[LayerSpec] = []
    channels = in_channels
    for level in range(config.levels):
        width = base * 2 ** level
        layers += _double_conv(f"enc{level}", channels, width)
        layers.append(LayerSpec("pool", f"enc{level}.pool"))
        channels = width
    width = base * 2 ** config.levels
    layers += _double_conv("bottleneck", channels, width)
    channels = width
    for level in reversed(range(config.levels)):
        width = base * 2 ** level
        layers.append(LayerSpec("upsample", f"dec{level}.up"))
        layers.append(LayerSpec("concat", f"dec{level}.skip"))
        layers += _double_conv(f"dec{level}", width + channels, width)
        channels = width
    layers.append(LayerSpec("conv", "head", channels, out_channels, 1))
    return layers


def _init_params(layers: List[LayerSpec], rng: np.random.Generator, head_gain: float = 1.0) -> Dict[str, Parameter]:
    dtype = default_dtype()
    params: Dict[str, Parameter] = {}
    for layer in layers:
        if layer.kind == "conv":
            shape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
            fan_in = layer.in_channels * layer.kernel * layer.kernel
        elif layer.kind == "dense":
            shape = (layer.out_channels, layer.in_channels)
            fan_in = layer.in_channels
        else:
            continue
        # He-normal
        gain = head_gain if layer.name == "head" else 1.0
        weight = rng.standard_normal(shape, dtype=dtype) * dtype(gain * np.sqrt(2.0 / fan_in))
        params[f"{layer.name}.weight"] = Parameter(f"{layer.name}.weight", weight)
        params[f"{layer.name}.bias"] = Parameter(f"{layer.name}.bias", np.zeros(layer.out_channels, dtype=dtype))
    return params


def snet_layers(config: NetConfig) -> List[LayerSpec]:
    return _unet_layers(config, 1, config.num_classes)


def rnet_layers(config: NetConfig) -> List[LayerSpec]:
    head = config.rnet_head_channels
    flat = head * config.patch_height * config.patch_width
    return _unet_layers(config, config.num_classes, head) + [
        LayerSpec("flatten", "flatten"),
        LayerSpec("dense", "dense", flat, config.num_boundaries * config.patch_width),
        LayerSpec("relu", "out.relu"),
    ]


def build_snet(config: NetConfig, seed: int = 0) -> Network:
    config = _validated(config)
    layers = snet_layers(config)
    net = Network("snet", config, layers, _init_params(layers, np.random.default_rng(seed), SNET_HEAD_GAIN))
    logger.debug(
        "built snet: %d conv, %d pool, %d parameters",
        net.count_layers("conv"), net.count_layers("pool"), net.parameter_count(),
    )
    return net


def build_rnet(config: NetConfig, seed: int = 0) -> Network:
    config = _validated(config)
    layers = rnet_layers(config)
    net = Network("rnet", config, layers, _init_params(layers, np.random.default_rng(seed)))
    logger.debug("built rnet: dense %d -> %d, %d parameters", layers[-2].in_channels, net.params["dense.bias"].size, net.parameter_count())
    return net


def build_network(kind: NetKind, config: NetConfig, seed: int = 0) -> Network:
    if kind == "snet":
        return build_snet(config, seed)
    if kind == "rnet":
        return build_rnet(config, seed)
    raise ValueError(f"unknown network kind {kind!r}")


def _as_tensor(x: Union[Tensor, np.ndarray]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def snet_forward(net: Network, patch: Union[Tensor, np.ndarray]) -> Tensor:
    """Per-pixel class probabilities, shape [C, H, W]."""
    if net.kind != "snet":
        raise ValueError(f"snet_forward needs an snet, got {net.kind}")
    return ops.softmax_over_classes(net.forward(_as_tensor(patch)))


def rnet_forward(net: Network, probs: Union[Tensor, np.ndarray]) -> Tensor:
    """Non-negative thickness map [B, W] in pixels."""
    if net.kind != "rnet":
        raise ValueError(f"rnet_forward needs an rnet, got {net.kind}")
    out = net.forward(_as_tensor(probs))
    return ops.reshape(out, (net.config.num_boundaries, net.config.patch_width))

