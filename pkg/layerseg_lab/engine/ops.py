"""Forward primitives of the engine.

Every primitive takes and returns Tensors. When gradients are enabled each
result carries a closure that maps the upstream gradient to one gradient per
parent (``None`` for parents that need none).
"""
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import Tensor, make_result, record_kink_margin

ArrayLike = Union[Tensor, np.ndarray]


@dataclass(frozen=True)
class Loss:
    total: Tensor
    mean: Tensor
    count: int


def _require_ndim(t: Tensor, ndim: int, what: str) -> None:
    if len(t.shape) != ndim:
        raise ShapeError(f"{what}: expected a {ndim}-d tensor, got shape {t.shape}")


def _im2col(x: np.ndarray, k: int, padding: int) -> Tuple[np.ndarray, int, int]:
    c, h, w = x.shape
    ho, wo = h + 2 * padding - k + 1, w + 2 * padding - k + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {k}x{k} does not fit input {h}x{w} with padding {padding}")
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (k, k), axis=(1, 2))
    cols = windows.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo)
    return cols, ho, wo


def _col2im(cols: np.ndarray, shape: Tuple[int, int, int], k: int, padding: int, ho: int, wo: int) -> np.ndarray:
    c, h, w = shape
    padded = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    cols = cols.reshape(c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            padded[:, i:i + ho, j:j + wo] += cols[:, i, j]
    return padded[:, padding:padding + h, padding:padding + w]


def conv2d(input: Tensor, kernels: Tensor, bias: Tensor, padding: Optional[int] = None) -> Tensor:
    _require_ndim(input, 3, "conv2d input")
    _require_ndim(kernels, 4, "conv2d kernels")
    c_out, c_in, kh, kw = kernels.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernels must be square with odd extent, got {kh}x{kw}")
    if input.shape[0] != c_in:
        raise ShapeError(
            f"conv2d: input has {input.shape[0]} channels but kernels expect {c_in} "
            f"(input {input.shape}, kernels {kernels.shape})"
        )
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {c_out} output channels")
    if padding is None:
        padding = (kh - 1) // 2

    cols, ho, wo = _im2col(input.data, kh, padding)
    w2 = kernels.data.reshape(c_out, -1)
    out = (w2 @ cols + bias.data[:, None]).reshape(c_out, ho, wo)

    def backward_fn(grad):
        g2 = grad.reshape(c_out, ho * wo)
        g_kernels = (g2 @ cols.T).reshape(kernels.shape)
        g_bias = g2.sum(axis=1)
        g_input = _col2im(w2.T @ g2, input.shape, kh, padding, ho, wo)
        return g_input, g_kernels, g_bias

    return make_result(out, (input, kernels, bias), backward_fn, "conv2d")


def maxpool2x2(input: Tensor) -> Tuple[Tensor, np.ndarray]:
    _require_ndim(input, 3, "maxpool2x2 input")
    c, h, w = input.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: spatial extents must be even, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = input.data.reshape(c, h2, 2, w2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h2, w2, 4)
    indices = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, indices[..., None], axis=-1)[..., 0]
    top2 = np.partition(windows, 2, axis=-1)
    # windows topped by an exact zero come from a clamped ReLU and are locally constant
    gaps = (top2[..., 3] - top2[..., 2])[top2[..., 3] != 0]
    if gaps.size:
        record_kink_margin(float(gaps.min()))

    def backward_fn(grad):
        g_windows = np.zeros((c, h2, w2, 4), dtype=grad.dtype)
        np.put_along_axis(g_windows, indices[..., None], grad[..., None], axis=-1)
        return (g_windows.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w),)

    return make_result(out, (input,), backward_fn, "maxpool2x2"), indices


def upsample2x2(input: Tensor) -> Tensor:
    _require_ndim(input, 3, "upsample2x2 input")
    c, h, w = input.shape
    out = np.repeat(np.repeat(input.data, 2, axis=1), 2, axis=2)

    def backward_fn(grad):
        return (grad.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return make_result(out, (input,), backward_fn, "upsample2x2")


def relu(input: Tensor) -> Tensor:
    x = input.data
    record_kink_margin(float(np.abs(x).min()))
    out = np.maximum(x, 0)
    # subgradient at exactly 0 is 0
    active = x > 0

    def backward_fn(grad):
        return (grad * active,)

    return make_result(out, (input,), backward_fn, "relu")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _require_ndim(a, 3, "concat_channels first input")
    _require_ndim(b, 3, "concat_channels second input")
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat_channels: spatial extents differ, {a.shape[1:]} vs {b.shape[1:]}")
    split = a.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)

    def backward_fn(grad):
        return grad[:split], grad[split:]

    return make_result(out, (a, b), backward_fn, "concat_channels")


def reshape(input: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = input.shape
    try:
        out = input.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {original} as {shape}") from e

    def backward_fn(grad):
        return (grad.reshape(original),)

    return make_result(out, (input,), backward_fn, "reshape")


def dense(input: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    _require_ndim(weights, 2, "dense weights")
    m, n = weights.shape
    x = input.data.reshape(-1)
    if x.size != n:
        raise ShapeError(f"dense: flattened input has length {x.size}, weights expect {n}")
    if bias.shape != (m,):
        raise ShapeError(f"dense: bias shape {bias.shape} does not match {m} outputs")
    out = weights.data @ x + bias.data

    def backward_fn(grad):
        return (weights.data.T @ grad).reshape(input.shape), np.outer(grad, x), grad

    return make_result(out, (input, weights, bias), backward_fn, "dense")


def softmax_over_classes(input: Tensor) -> Tensor:
    _require_ndim(input, 3, "softmax_over_classes input")
    z = input.data - input.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=0, keepdims=True)

    def backward_fn(grad):
        return (probs * (grad - (grad * probs).sum(axis=0, keepdims=True)),)

    return make_result(probs, (input,), backward_fn, "softmax_over_classes")


def scale(input: Tensor, factor: float) -> Tensor:
    def backward_fn(grad):
        return (grad * factor,)

    return make_result(input.data * factor, (input,), backward_fn, "scale")


def weighted_sum(input: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar projection sum(input * weights); used by the gradient checks."""
    weights = np.asarray(weights, dtype=input.dtype)
    if weights.shape != input.shape:
        raise ShapeError(f"weighted_sum: weights {weights.shape} vs input {input.shape}")

    def backward_fn(grad):
        return (grad * weights,)

    return make_result(np.sum(input.data * weights), (input,), backward_fn, "weighted_sum")


def _check_labels(labels: np.ndarray, num_classes: int, spatial: Tuple[int, ...]) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != spatial:
        raise ShapeError(f"labels shape {labels.shape} does not match probability map {spatial}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ShapeError(
            f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]"
        )
    return labels.astype(np.int64)


def _with_mean(total: Tensor, count: int) -> Loss:
    return Loss(total=total, mean=scale(total, 1.0 / count), count=count)


def cross_entropy_loss(probs: Tensor, labels: np.ndarray) -> Loss:
    """L = -sum_x log p_{l(x)}(x) over every pixel of the patch."""
    _require_ndim(probs, 3, "cross_entropy_loss probs")
    c = probs.shape[0]
    labels = _check_labels(labels, c, probs.shape[1:])
    one_hot = (np.arange(c)[:, None, None] == labels[None]).astype(probs.dtype)

    if probs.op == "softmax_over_classes" and probs._parents:
        # fused path: differentiate w.r.t. the logits directly
        logits = probs._parents[0]
        z = logits.data - logits.data.max(axis=0, keepdims=True)
        log_probs = z - np.log(np.exp(z).sum(axis=0, keepdims=True))
        total = -np.sum(log_probs * one_hot)
        p = probs.data

        def fused_backward(grad):
            return (grad * (p - one_hot),)

        loss = make_result(total, (logits,), fused_backward, "cross_entropy_loss")
    else:
        tiny = np.finfo(probs.dtype).tiny
        p = np.maximum(probs.data, tiny)
        total = -np.sum(np.log(p) * one_hot)

        def backward_fn(grad):
            return (-grad * one_hot / p,)

        loss = make_result(total, (probs,), backward_fn, "cross_entropy_loss")
    return _with_mean(loss, labels.size)


def mse_loss(pred: Tensor, target: ArrayLike) -> Loss:
    """L = ||target - pred||^2 summed over all elements."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target
    total = np.sum(diff * diff)

    def backward_fn(grad):
        return (2.0 * grad * diff,)

    loss = make_result(total, (pred,), backward_fn, "mse_loss")
    return _with_mean(loss, pred.size)
