import logging
from dataclasses import dataclass
from typing import List, Literal, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.ndimage import median_filter, uniform_filter1d

from ..errors import ShapeError

logger = logging.getLogger(__name__)


class PipelineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    crop_height: int = Field(128, gt=0)
    target_row: int = Field(96, ge=0)
    smoothing_window: int = Field(9, gt=0)
    band_fraction: float = Field(0.8, gt=0, lt=1)
    median_window: int = Field(15, gt=0)
    patch_size: int = Field(128, gt=0)
    patch_count: int = Field(20, gt=0)
    stitch_weighting: Literal["mean", "center"] = "mean"


@dataclass(frozen=True)
class FlattenRecord:
    shifts: np.ndarray
    crop_top: int
    original_height: int

    def to_original_rows(self, rows: np.ndarray) -> np.ndarray:
        """Map flattened-crop row positions [..., W] back to the source B-scan."""
        return rows + self.crop_top - self.shifts


@dataclass(frozen=True)
class PatchLayout:
    patch_size: int
    starts: Tuple[int, ...]

    @property
    def count(self) -> int:
        return len(self.starts)

    @classmethod
    def for_width(cls, width: int, patch_size: int = 128, count: int = 20) -> "PatchLayout":
        if width < patch_size:
            raise ShapeError(f"image width {width} is smaller than the patch size {patch_size}")
        if count < 1:
            raise ValueError(f"patch count must be >= 1, got {count}")
        if count == 1:
            starts = (0,)
        else:
            step = (width - patch_size) / (count - 1)
            # narrow images repeat start columns; keep each once
            starts = tuple(sorted({int(np.floor(k * step + 0.5)) for k in range(count)}))
        layout = cls(patch_size, starts)
        layout.check_coverage(width)
        return layout

    def check_coverage(self, width: int) -> None:
        covered = np.zeros(width, dtype=bool)
        for start in self.starts:
            covered[start:start + self.patch_size] = True
        gaps = np.flatnonzero(~covered)
        if gaps.size:
            raise ShapeError(
                f"{self.count} patches of width {self.patch_size} leave column {int(gaps[0])} uncovered"
            )


def _brightest_band_centroid(column: np.ndarray, fraction: float) -> float:
    lo, hi = column.min(), column.max()
    if hi <= lo:
        return np.nan
    peak = int(column.argmax())
    above = column >= lo + fraction * (hi - lo)
    top = peak
    while top > 0 and above[top - 1]:
        top -= 1
    bottom = peak
    while bottom < column.size - 1 and above[bottom + 1]:
        bottom += 1
    rows = np.arange(top, bottom + 1)
    weights = column[top:bottom + 1]
    return float((rows * weights).sum() / weights.sum())


def estimate_baseline(bscan: np.ndarray, cfg: PipelineConfig = PipelineConfig()) -> np.ndarray:
    """Approximate Bruch's membrane row per column."""
    image = np.asarray(bscan, dtype=np.float64)
    if image.ndim == 3:
        image = image[0]
    height, width = image.shape
    smoothed = uniform_filter1d(image, size=cfg.smoothing_window, axis=1, mode="nearest")
    rows = np.array([_brightest_band_centroid(smoothed[:, j], cfg.band_fraction) for j in range(width)])

    valid = ~np.isnan(rows)
    if not valid.any():
        logger.warning("no bright band found in any column, using the image middle as baseline")
        return np.full(width, height / 2.0)
    if not valid.all():
        cols = np.arange(width)
        rows = np.interp(cols, cols[valid], rows[valid])
    return median_filter(rows, size=cfg.median_window, mode="nearest")


def flatten_and_crop(
    bscan: np.ndarray, baseline: np.ndarray, cfg: PipelineConfig = PipelineConfig()
) -> Tuple[np.ndarray, FlattenRecord]:
    image = np.asarray(bscan, dtype=np.float32)
    if image.ndim == 3:
        image = image[0]
    height, width = image.shape
    baseline = np.asarray(baseline, dtype=np.float64)
    if baseline.shape != (width,):
        raise ShapeError(f"baseline needs {width} entries, got shape {baseline.shape}")

    anchor = int(np.floor(np.median(baseline) + 0.5))
    shifts = anchor - np.floor(baseline + 0.5).astype(np.int64)
    crop_top = anchor - cfg.target_row

    out = np.zeros((cfg.crop_height, width), dtype=np.float32)
    rows = np.arange(cfg.crop_height)
    for j in range(width):
        src = rows + crop_top - shifts[j]
        inside = (src >= 0) & (src < height)
        out[inside, j] = image[src[inside], j]
    return out[None], FlattenRecord(shifts=shifts, crop_top=int(crop_top), original_height=height)


def unflatten_image(cropped: np.ndarray, record: FlattenRecord) -> np.ndarray:
    """Place flattened-crop pixels back at their source rows; other pixels are zero."""
    cropped = np.asarray(cropped)
    if cropped.ndim == 3:
        cropped = cropped[0]
    crop_height, width = cropped.shape
    out = np.zeros((record.original_height, width), dtype=cropped.dtype)
    rows = np.arange(crop_height)
    for j in range(width):
        dst = rows + record.crop_top - record.shifts[j]
        inside = (dst >= 0) & (dst < record.original_height)
        out[dst[inside], j] = cropped[inside, j]
    return out


def extract_patches(image: np.ndarray, layout: PatchLayout) -> List[Tuple[int, np.ndarray]]:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    width = image.shape[-1]
    if width < layout.patch_size:
        raise ShapeError(f"image width {width} is smaller than the patch size {layout.patch_size}")
    layout.check_coverage(width)
    return [(start, image[:, :, start:start + layout.patch_size]) for start in layout.starts]


def _column_weights(size: int, weighting: str) -> np.ndarray:
    if weighting == "mean":
        return np.ones(size)
    # triangular window, strictly positive at the edges
    x = (np.arange(size) + 0.5) / size
    return 1.0 - np.abs(2.0 * x - 1.0) + 1.0 / size


def stitch(patches: Sequence[Tuple[int, np.ndarray]], width: int, weighting: str = "mean") -> np.ndarray:
    """Combine per-patch maps [..., P] (thicknesses [B, P] or probabilities) into [..., width]."""
    if not patches:
        raise ShapeError("stitch needs at least one patch")
    total = np.zeros(np.shape(patches[0][1])[:-1] + (width,))
    weight = np.zeros(width)
    for start, t in patches:
        t = np.asarray(t, dtype=np.float64)
        size = t.shape[-1]
        if start < 0 or start + size > width:
            raise ShapeError(f"patch at column {start} of width {size} exceeds image width {width}")
        w = _column_weights(size, weighting)
        total[..., start:start + size] += t * w
        weight[start:start + size] += w
    gaps = np.flatnonzero(weight == 0)
    if gaps.size:
        raise ShapeError(f"stitched patches leave column {int(gaps[0])} uncovered")
    return total / weight
