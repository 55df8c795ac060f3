import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from ..engine.tensor import no_grad
from ..errors import CompatibilityError, ShapeError
from .nets import Network, rnet_forward, snet_forward
from .preprocessing import (
    FlattenRecord,
    PatchLayout,
    PipelineConfig,
    estimate_baseline,
    extract_patches,
    flatten_and_crop,
    stitch,
)
from .topology import boundaries_from_labels, thickness_to_boundaries, unstacked_columns

logger = logging.getLogger(__name__)

STAGES = ("preprocess", "inference", "reconstruction")


@dataclass
class ScanResult:
    boundaries: np.ndarray
    flat_boundaries: np.ndarray
    thickness: np.ndarray
    record: FlattenRecord
    timings: Dict[str, float] = field(default_factory=dict)
    snet_boundaries: Optional[np.ndarray] = None
    probabilities: Optional[np.ndarray] = None
    unstacked_columns: int = 0


def check_compatible(snet: Network, rnet: Network, cfg: PipelineConfig) -> None:
    if snet.kind != "snet" or rnet.kind != "rnet":
        raise CompatibilityError(f"expected an snet and an rnet, got {snet.kind} and {rnet.kind}")
    s, r = snet.config, rnet.config
    if s.num_classes != r.num_classes:
        raise CompatibilityError(f"snet emits {s.num_classes} classes but rnet expects {r.num_classes}")
    if (s.patch_height, s.patch_width) != (r.patch_height, r.patch_width):
        raise CompatibilityError(
            f"patch size differs: snet {s.patch_height}x{s.patch_width}, rnet {r.patch_height}x{r.patch_width}"
        )
    if cfg.crop_height != s.patch_height or cfg.patch_size != s.patch_width:
        raise CompatibilityError(
            f"pipeline crops {cfg.crop_height} rows into {cfg.patch_size}-wide patches, "
            f"networks take {s.patch_height}x{s.patch_width}"
        )


def infer_bscan(
    bscan: np.ndarray,
    snet: Network,
    rnet: Network,
    cfg: PipelineConfig = PipelineConfig(),
    snet_baseline: bool = False,
) -> ScanResult:
    """Boundaries [B, W] of one B-scan in its original row coordinates."""
    started = time.perf_counter()
    baseline = estimate_baseline(bscan, cfg)
    flat, record = flatten_and_crop(bscan, baseline, cfg)
    width = flat.shape[-1]
    layout = PatchLayout.for_width(width, cfg.patch_size, cfg.patch_count)
    patches = extract_patches(flat, layout)
    preprocessed = time.perf_counter()

    thickness_patches, prob_patches = [], []
    with no_grad():
        for start, patch in patches:
            probs = snet_forward(snet, patch)
            thickness_patches.append((start, rnet_forward(rnet, probs).data))
            if snet_baseline:
                prob_patches.append((start, probs.data))
    inferred = time.perf_counter()

    thickness = stitch(thickness_patches, width, cfg.stitch_weighting)
    flat_boundaries = thickness_to_boundaries(thickness)
    boundaries = record.to_original_rows(flat_boundaries)
    finished = time.perf_counter()

    result = ScanResult(
        boundaries=boundaries,
        flat_boundaries=flat_boundaries,
        thickness=thickness,
        record=record,
        timings={
            "preprocess": preprocessed - started,
            "inference": inferred - preprocessed,
            "reconstruction": finished - inferred,
            "total": finished - started,
        },
    )
    if snet_baseline:
        probabilities = stitch(prob_patches, width, cfg.stitch_weighting)
        labels = probabilities.argmax(axis=0)
        result.probabilities = probabilities
        result.snet_boundaries = record.to_original_rows(boundaries_from_labels(labels, snet.config.num_classes))
        result.unstacked_columns = unstacked_columns(labels)
    return result


def infer_volume(
    volume: np.ndarray,
    snet: Network,
    rnet: Network,
    cfg: PipelineConfig = PipelineConfig(),
    threads: int = 1,
    snet_baseline: bool = False,
) -> List[ScanResult]:
    volume = np.asarray(volume)
    if volume.ndim == 2:
        volume = volume[None]
    if volume.ndim != 3:
        raise ShapeError(f"volume must be [N, H, W], got shape {volume.shape}")
    check_compatible(snet, rnet, cfg)
    if volume.shape[2] < cfg.patch_size:
        raise ShapeError(f"B-scan width {volume.shape[2]} is smaller than the patch size {cfg.patch_size}")

    def _one(index: int) -> ScanResult:
        return infer_bscan(volume[index], snet, rnet, cfg, snet_baseline)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(_one, range(volume.shape[0])))
    logger.info(
        "inferred %d B-scans in %.2fs", len(results), sum(r.timings["total"] for r in results)
    )
    return results
