"""Netpbm output (PGM graymaps, PPM pixmaps): B-scans, boundary overlays, class probability maps."""
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from ..errors import ContainerError, ShapeError
from .preprocessing import FlattenRecord, unflatten_image

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

COLORS: List[Tuple[int, int, int]] = [
    (255, 0, 0), (255, 128, 0), (255, 255, 0), (0, 255, 0), (0, 255, 255),
    (0, 128, 255), (0, 0, 255), (192, 0, 255), (255, 0, 192),
]


def to_gray8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim != 2:
        raise ShapeError(f"expected a single-channel image, got shape {image.shape}")
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _save(path: PathLike, picture: Image.Image) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        picture.save(path, format="PPM")
    except OSError as e:
        raise ContainerError(f"cannot write {path}: {e}") from e
    return path


def write_gray(path: PathLike, image: np.ndarray) -> Path:
    return _save(path, Image.fromarray(to_gray8(image)))


def write_rgb(path: PathLike, rgb: np.ndarray) -> Path:
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeError(f"expected an [H, W, 3] image, got shape {rgb.shape}")
    return _save(path, Image.fromarray(np.ascontiguousarray(rgb)))


def read_image(path: PathLike) -> np.ndarray:
    try:
        with Image.open(path) as picture:
            return np.array(picture)
    except OSError as e:
        raise ContainerError(f"cannot read image {path}: {e}") from e


def overlay_boundaries(
    image: np.ndarray, boundaries: np.ndarray, colors: Sequence[Tuple[int, int, int]] = COLORS
) -> np.ndarray:
    gray = to_gray8(image)
    h, w = gray.shape
    b = np.asarray(boundaries, dtype=np.float64)
    if b.ndim != 2 or b.shape[1] != w:
        raise ShapeError(f"boundaries must be [B, {w}], got shape {b.shape}")
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    cols = np.arange(w)
    for k in range(b.shape[0]):
        rows = np.floor(b[k] + 0.5).astype(np.int64)
        inside = (rows >= 0) & (rows < h)
        rgb[rows[inside], cols[inside]] = colors[k % len(colors)]
    return rgb


def render_scan(
    out_dir: PathLike,
    stem: str,
    bscan: np.ndarray,
    boundaries: np.ndarray,
    truth: Optional[np.ndarray] = None,
    probabilities: Optional[np.ndarray] = None,
    record: Optional[FlattenRecord] = None,
) -> List[Path]:
    """Write the B-scan, its overlays and (optionally) per-class probability maps.

    Probability maps live in flattened-crop coordinates; with a record they are
    moved back so every file has the B-scan's dimensions.
    """
    out_dir = Path(out_dir)
    image = np.asarray(bscan)
    if image.ndim == 3:
        image = image[0]
    written = [
        write_gray(out_dir / f"{stem}.pgm", image),
        write_rgb(out_dir / f"{stem}_overlay.ppm", overlay_boundaries(image, boundaries)),
    ]
    if truth is not None:
        written.append(write_rgb(out_dir / f"{stem}_truth.ppm", overlay_boundaries(image, truth)))
    if probabilities is not None:
        for c, prob in enumerate(np.asarray(probabilities)):
            if record is not None:
                prob = unflatten_image(prob, record)
            written.append(write_gray(out_dir / f"{stem}_prob{c:02d}.pgm", prob))
    logger.debug("rendered %d file(s) for %s", len(written), stem)
    return written
