"""Label masks, per-column thicknesses and boundary positions.

A valid label mask is stacked: reading any column top to bottom the class
index never decreases. Thicknesses are per-column pixel counts, boundaries are
their prefix sums, so non-negative thicknesses always give ordered boundaries.
"""
from typing import Literal, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..errors import ShapeError, TopologyError


class DefectConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ellipse_count: Tuple[int, int] = (0, 3)
    ellipse_axes: Tuple[float, float] = (3.0, 20.0)
    magnitude: Tuple[float, float] = (-1.0, 1.0)
    ellipse_mode: Literal["per_channel", "single_channel"] = "per_channel"
    gaussian_noise_sigma: float = Field(0.1, ge=0)
    vertical_shift: Tuple[int, int] = (-8, 8)
    dilate_shrink: Tuple[int, int] = (-2, 2)
    seed: int = 0

    @model_validator(mode="after")
    def _check_ranges(self) -> "DefectConfig":
        lo, hi = self.magnitude
        if not -1.0 <= lo <= hi <= 1.0:
            raise ValueError(f"magnitude range {self.magnitude} must lie within [-1, 1]")
        for name in ("ellipse_count", "ellipse_axes", "vertical_shift", "dilate_shrink"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
        if self.ellipse_count[0] < 0 or self.ellipse_axes[0] < 0:
            raise ValueError("ellipse counts and semi-axes must be non-negative")
        return self

    @classmethod
    def identity(cls) -> "DefectConfig":
        return cls(
            ellipse_count=(0, 0), gaussian_noise_sigma=0.0, vertical_shift=(0, 0), dilate_shrink=(0, 0)
        )


def check_stacked(mask: np.ndarray) -> None:
    if mask.ndim != 2:
        raise ShapeError(f"label mask must be 2-d, got shape {mask.shape}")
    bad = np.flatnonzero((np.diff(mask, axis=0) < 0).any(axis=0))
    if bad.size:
        raise TopologyError(f"column {int(bad[0])} is not stacked (class index decreases downwards)", int(bad[0]))


def unstacked_columns(mask: np.ndarray) -> int:
    """Number of columns whose label sequence violates the layer ordering."""
    return int((np.diff(mask, axis=0) < 0).any(axis=0).sum())


def thickness_to_boundaries(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 2:
        raise ShapeError(f"thickness map must be [B, W], got shape {t.shape}")
    if not np.isfinite(t).all():
        raise TopologyError("thickness map contains non-finite entries")
    negative = np.argwhere(t < 0)
    if negative.size:
        raise TopologyError(
            f"negative thickness {t[tuple(negative[0])]} at layer {negative[0][0]}, column {negative[0][1]}",
            int(negative[0][1]),
        )
    return np.cumsum(t, axis=0)


def mask_to_thickness(mask: np.ndarray, num_classes: int) -> np.ndarray:
    mask = np.asarray(mask)
    check_stacked(mask)
    if mask.size and (mask.min() < 0 or mask.max() >= num_classes):
        raise TopologyError(f"labels must lie in [0, {num_classes}), got [{mask.min()}, {mask.max()}]")
    classes = np.arange(num_classes - 1)[:, None, None]
    return (mask[None] == classes).sum(axis=1).astype(np.float64)


def boundaries_to_mask(b: np.ndarray, height: int) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 2:
        raise ShapeError(f"boundary set must be [B, W], got shape {b.shape}")
    descending = np.flatnonzero((np.diff(b, axis=0) < 0).any(axis=0))
    if descending.size:
        col = int(descending[0])
        raise TopologyError(f"boundaries are not ordered in column {col}", col)
    centers = np.arange(height, dtype=np.float64)[None, :, None] + 0.5
    return (b[:, None, :] <= centers).sum(axis=0).astype(np.int64)


def one_hot(mask: np.ndarray, num_classes: int) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() >= num_classes):
        raise TopologyError(f"labels must lie in [0, {num_classes}), got [{mask.min()}, {mask.max()}]")
    return (np.arange(num_classes)[:, None, None] == mask[None]).astype(np.float64)


def boundaries_from_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Read boundaries straight off a (possibly unstacked) label image.

    Boundary k sits at the first row whose label reaches class k + 1; columns
    where the class never appears put it at the image height.
    """
    height = labels.shape[0]
    reached = labels[None] >= np.arange(1, num_classes)[:, None, None]
    first = np.where(reached.any(axis=1), reached.argmax(axis=1), height)
    return first.astype(np.float64)


def _ellipse(shape: Tuple[int, int], rng: np.random.Generator, cfg: DefectConfig) -> np.ndarray:
    h, w = shape
    ry, rx = rng.uniform(cfg.ellipse_axes[0], cfg.ellipse_axes[1], size=2)
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    magnitude = rng.uniform(cfg.magnitude[0], cfg.magnitude[1])
    if ry <= 0 or rx <= 0:
        return np.zeros(shape)
    rows = (np.arange(h)[:, None] + 0.5 - cy) / ry
    cols = (np.arange(w)[None, :] + 0.5 - cx) / rx
    return magnitude * (rows * rows + cols * cols <= 1.0)


def _geometric_transform(mask: np.ndarray, num_classes: int, cfg: DefectConfig, rng: np.random.Generator) -> np.ndarray:
    height = mask.shape[0]
    t = mask_to_thickness(mask, num_classes)
    shift = int(rng.integers(cfg.vertical_shift[0], cfg.vertical_shift[1] + 1))
    grow = rng.integers(cfg.dilate_shrink[0], cfg.dilate_shrink[1] + 1, size=t.shape[0] - 1)
    if shift == 0 and not grow.any():
        return mask
    # absent layers stay absent, present ones never drop below zero
    t[1:] = np.where(t[1:] > 0, np.maximum(t[1:] + grow[:, None], 0), 0)
    b = np.maximum(thickness_to_boundaries(t) + shift, 0)
    return boundaries_to_mask(b, height)


def simulate_defects(
    onehot: np.ndarray, cfg: DefectConfig, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """Corrupt a one-hot mask the way the regression net sees it in training.

    Returns the corrupted input g(x) + s(x) (not clamped) and the geometrically
    transformed mask whose thicknesses are the regression target.
    """
    onehot = np.asarray(onehot, dtype=np.float64)
    if onehot.ndim != 3:
        raise ShapeError(f"one-hot input must be [C, H, W], got shape {onehot.shape}")
    c, h, w = onehot.shape
    mask = onehot.argmax(axis=0)
    moved = _geometric_transform(mask, c, cfg, rng)
    out = one_hot(moved, c) if moved is not mask else onehot.copy()

    if cfg.ellipse_mode == "per_channel":
        for channel in range(c):
            for _ in range(int(rng.integers(cfg.ellipse_count[0], cfg.ellipse_count[1] + 1))):
                out[channel] += _ellipse((h, w), rng, cfg)
    else:
        for _ in range(int(rng.integers(cfg.ellipse_count[0], cfg.ellipse_count[1] + 1))):
            channel = int(rng.integers(0, c))
            out[channel] += _ellipse((h, w), rng, cfg)

    if cfg.gaussian_noise_sigma > 0:
        out += rng.normal(0.0, cfg.gaussian_noise_sigma, size=out.shape)
    return out, moved
