import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..errors import ContainerError
from .run_storage import DatasetManifest, config_hash, save_item, write_manifest
from .topology import boundaries_to_mask

logger = logging.getLogger(__name__)

# RNFL, GCL+IPL, INL, OPL, ONL, IS, OS, RPE
DEFAULT_THICKNESS = [8.0, 14.0, 8.0, 7.0, 18.0, 5.0, 5.0, 6.0]
DEFAULT_VARIATION = [3.0, 5.0, 3.0, 2.0, 5.0, 1.5, 1.5, 2.0]
# vitreous, the eight layers, choroid; each stays >= 3.7 noise sigmas inside [0, 1] so clipping keeps the means
DEFAULT_INTENSITY = [0.1, 0.55, 0.4, 0.22, 0.45, 0.15, 0.35, 0.5, 0.72, 0.3]


class PhantomConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    height: int = Field(128, gt=0)
    width: int = Field(128, gt=0)
    num_layers: int = Field(8, gt=0)
    top_offset: float = Field(28.0, ge=0)
    top_variation: float = Field(6.0, ge=0)
    curvature: float = Field(0.0, ge=0)
    mean_thickness: List[float] = Field(default_factory=lambda: list(DEFAULT_THICKNESS))
    variation: List[float] = Field(default_factory=lambda: list(DEFAULT_VARIATION))
    smoothness: float = Field(96.0, gt=0)
    components: int = Field(3, gt=0)
    pinch_probability: float = Field(0.3, ge=0, le=1)
    pinch_width: float = Field(40.0, ge=0)
    pinch_layers: List[int] = Field(default_factory=lambda: [1, 2, 3, 4])
    intensities: List[float] = Field(default_factory=lambda: list(DEFAULT_INTENSITY))
    noise_sigma: float = Field(0.02, ge=0)
    speckle_sigma: float = Field(0.1, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_geometry(self) -> "PhantomConfig":
        n = self.num_layers
        if len(self.mean_thickness) != n or len(self.variation) != n:
            raise ValueError(f"mean_thickness and variation need {n} entries each")
        if len(self.intensities) != n + 2:
            raise ValueError(f"intensities need {n + 2} entries (vitreous, layers, choroid)")
        if any(not 0.0 <= v <= 1.0 for v in self.intensities):
            raise ValueError("intensities must lie in [0, 1]")
        for k, (mean, var) in enumerate(zip(self.mean_thickness, self.variation)):
            if var < 0 or mean < var:
                raise ValueError(f"layer {k + 1}: mean thickness {mean} must be >= variation {var} >= 0")
        if self.top_offset < self.top_variation:
            raise ValueError(f"top_offset {self.top_offset} must be >= top_variation {self.top_variation}")
        deepest = self.top_offset + self.top_variation + self.curvature + sum(self.mean_thickness) + sum(self.variation)
        if deepest > self.height:
            raise ValueError(f"retina may extend to row {deepest:.1f}, beyond the image height {self.height}")
        if any(not 1 <= k <= n for k in self.pinch_layers):
            raise ValueError(f"pinch_layers must name layers 1..{n}")
        return self

    @property
    def num_classes(self) -> int:
        return self.num_layers + 2


VOLUME_DEFAULTS = {
    "height": 496,
    "width": 1024,
    "top_offset": 170.0,
    "top_variation": 30.0,
    "curvature": 60.0,
    "smoothness": 400.0,
    "pinch_width": 120.0,
}


def _undulation(amplitude: float, cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    x = np.arange(cfg.width, dtype=np.float64)
    weights = rng.dirichlet(np.ones(cfg.components))
    periods = rng.uniform(cfg.smoothness, 4.0 * cfg.smoothness, size=cfg.components)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=cfg.components)
    waves = np.sin(2.0 * np.pi * x[None, :] / periods[:, None] + phases[:, None])
    # |sum of weighted sines| <= amplitude since the weights sum to one
    return amplitude * (weights @ waves)


def sample_thickness(cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    """Smooth per-layer profiles, row 0 the vitreous extent, shape [num_layers + 1, W]."""
    x = np.arange(cfg.width, dtype=np.float64)
    half = cfg.width / 2.0
    bowl = cfg.curvature * ((x - half) / half) ** 2
    rows = [cfg.top_offset + _undulation(cfg.top_variation, cfg, rng) + bowl]
    for mean, var in zip(cfg.mean_thickness, cfg.variation):
        rows.append(mean + _undulation(var, cfg, rng))
    t = np.maximum(np.array(rows), 0.0)

    if cfg.pinch_width > 0 and rng.random() < cfg.pinch_probability:
        lo, hi = cfg.pinch_width / 2.0, cfg.width - cfg.pinch_width / 2.0
        center = rng.uniform(lo, hi) if hi > lo else half
        quarter = cfg.pinch_width / 4.0
        taper = np.clip((np.abs(x - center) - quarter) / quarter, 0.0, 1.0)
        for k in cfg.pinch_layers:
            t[k] *= taper
    return t


def render_image(mask: np.ndarray, cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    image = np.asarray(cfg.intensities, dtype=np.float64)[mask]
    if cfg.speckle_sigma > 0:
        image = image * (1.0 + cfg.speckle_sigma * rng.standard_normal(image.shape))
    if cfg.noise_sigma > 0:
        image = image + cfg.noise_sigma * rng.standard_normal(image.shape)
    return np.clip(image, 0.0, 1.0)


def generate_phantom(cfg: PhantomConfig, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Returns image [1, H, W] in [0, 1] and its stacked label mask [H, W]."""
    t = sample_thickness(cfg, rng)
    # rounding the prefix sums keeps them ordered and integer
    boundaries = np.floor(np.cumsum(t, axis=0) + 0.5)
    mask = boundaries_to_mask(boundaries, cfg.height)
    image = render_image(mask, cfg, rng)
    return image[None].astype(np.float32), mask


def generate_volume(cfg: PhantomConfig, scans: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """A stack of B-scans [N, H, W] with ground-truth boundaries [N, B, W]."""
    images, truths = [], []
    for _ in range(scans):
        t = sample_thickness(cfg, rng)
        boundaries = np.floor(np.cumsum(t, axis=0) + 0.5)
        mask = boundaries_to_mask(boundaries, cfg.height)
        images.append(render_image(mask, cfg, rng).astype(np.float32))
        truths.append(boundaries)
    if not images:
        return np.zeros((0, cfg.height, cfg.width), np.float32), np.zeros((0, cfg.num_layers + 1, cfg.width))
    return np.stack(images), np.stack(truths)


def generate_dataset(
    cfg: PhantomConfig,
    count: int,
    seed: int,
    out_dir: Path,
    threads: int = 1,
    extra: Optional[Dict[str, Any]] = None,
) -> DatasetManifest:
    """Write ``count`` phantom patches plus a manifest of per-item seeds."""
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ContainerError(f"cannot create {out_dir}: {e}") from e
    item_seeds = [int(s) for s in np.random.default_rng(seed).integers(0, 2**32, size=count, dtype=np.uint64)]

    def _write(index: int) -> str:
        image, mask = generate_phantom(cfg, np.random.default_rng(item_seeds[index]))
        return save_item(out_dir, index, image, mask, item_seeds[index])

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        files = list(pool.map(_write, range(count)))

    manifest = DatasetManifest(
        kind="patches",
        count=count,
        seed=seed,
        config=cfg.model_dump(mode="json"),
        config_hash=config_hash(cfg),
        items=[{"file": f, "seed": s} for f, s in zip(files, item_seeds)],
    )
    write_manifest(out_dir, {**(extra or {}), **manifest.to_dict()})
    logger.info("wrote %d phantom patches to %s", count, out_dir)
    return manifest
