"""Binary fruit silhouettes: built-in segmenter, external mask ingestion, quality filter.

A mask provider is anything that yields :class:`SilhouetteMask` objects.
Masks from external tools (e.g. Segment Anything) enter through
:func:`ingest_external_mask`; images on a uniform background can be
segmented directly with :func:`segment_uniform_background`.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from fruitform.errors import ValidationError
from fruitform.io_utils import PathLike, atomic_write_bytes, atomic_write_text

MASK_SUFFIX = ".mask.png"
MASK_THRESHOLD = 128
AREA_RANGE = (0.05, 0.95)
DEFAULT_TOL = 30.0
DOMINANT_BORDER_FRACTION = 0.6
TRUNCATION_BORDER_FRACTION = 0.5

# 4-connectivity
_CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass
class SilhouetteMask:
    record_id: str
    grid: np.ndarray  # uint8, values in {0, 1}
    reason: Optional[str] = None  # None means the mask passed

    @property
    def passed(self) -> bool:
        return self.reason is None

    @property
    def area_fraction(self) -> float:
        return float(self.grid.sum()) / self.grid.size if self.grid.size else 0.0

    @property
    def quality(self) -> str:
        return "Pass" if self.passed else f"Fail({self.reason})"


def cleanup(grid: np.ndarray) -> np.ndarray:
    """Keep the largest 4-connected component and fill its holes.

    Equal-size components resolve to the first in raster order.
    """
    fg = np.asarray(grid).astype(bool)
    labels, n = ndimage.label(fg, structure=_CROSS)
    if n == 0:
        return np.zeros(fg.shape, dtype=np.uint8)
    if n > 1:
        sizes = np.bincount(labels.ravel())[1:]
        fg = labels == (int(np.argmax(sizes)) + 1)
    return ndimage.binary_fill_holes(fg, structure=_CROSS).astype(np.uint8)


def _border(a: np.ndarray) -> np.ndarray:
    if a.shape[0] < 2 or a.shape[1] < 2:
        return a.reshape((-1,) + a.shape[2:])
    return np.concatenate([a[0, :], a[-1, :], a[1:-1, 0], a[1:-1, -1]], axis=0)


def _as_uint8_rgb(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValidationError(f"expected an HxWx3 image, got shape {rgb.shape}")
    if rgb.dtype != np.uint8:
        rgb = np.clip(np.rint(rgb.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    return rgb


def segment_uniform_background(rgb: np.ndarray, tol: float = DEFAULT_TOL,
                               record_id: str = "") -> SilhouetteMask:
    """Foreground = pixels farther than ``tol`` (RGB Euclidean, 0-255 scale)
    from the border colour mode, then :func:`cleanup`."""
    rgb = _as_uint8_rgb(rgb)
    empty = np.zeros(rgb.shape[:2], dtype=np.uint8)
    border = _border(rgb).astype(np.int32)
    colors, counts = np.unique(border, axis=0, return_counts=True)
    mode = colors[int(np.argmax(counts))]
    near = np.sqrt(((border - mode) ** 2).sum(axis=1)) <= tol
    if near.mean() < DOMINANT_BORDER_FRACTION:
        return SilhouetteMask(record_id, empty, "non-uniform background")

    dist = np.sqrt(((rgb.astype(np.int32) - mode) ** 2).sum(axis=2))
    grid = cleanup(dist > tol)
    if not grid.any():
        return SilhouetteMask(record_id, grid, "empty foreground")
    # per side: a whole-border fraction can never pass 0.5 once the background owns 60% of it
    sides = (grid[0, :], grid[-1, :], grid[:, 0], grid[:, -1])
    if max(s.mean() for s in sides) > TRUNCATION_BORDER_FRACTION:
        return SilhouetteMask(record_id, grid, "truncated object")
    return SilhouetteMask(record_id, grid)


def mask_from_grayscale(gray: np.ndarray, record_id: str = "") -> SilhouetteMask:
    binary = (np.asarray(gray) >= MASK_THRESHOLD).astype(np.uint8)
    if binary.all() or not binary.any():
        return SilhouetteMask(record_id, binary, "degenerate mask")
    return SilhouetteMask(record_id, cleanup(binary))


def ingest_external_mask(record_id: str, mask_path: PathLike,
                         expected_size: Optional[Tuple[int, int]] = None) -> SilhouetteMask:
    """Load an externally produced mask; ``expected_size`` is the source image (width, height)."""
    with Image.open(mask_path) as im:
        if expected_size is not None and tuple(im.size) != tuple(expected_size):
            raise ValidationError(
                f"mask for {record_id!r} is {im.size[0]}x{im.size[1]}, "
                f"image is {expected_size[0]}x{expected_size[1]}")
        gray = np.asarray(im.convert("L"))
    return mask_from_grayscale(gray, record_id)


def quality_filter(masks: Iterable[SilhouetteMask],
                   area_range: Tuple[float, float] = AREA_RANGE
                   ) -> Tuple[List[SilhouetteMask], List[Tuple[str, str]]]:
    kept, excluded = [], []
    lo, hi = area_range
    for m in masks:
        if not m.passed:
            excluded.append((m.record_id, m.reason))
        elif not lo <= m.area_fraction <= hi:
            excluded.append((m.record_id, "area out of range"))
        else:
            kept.append(m)
    return kept, excluded


def mask_path(mask_dir: PathLike, record_id: str) -> Path:
    return Path(mask_dir) / f"{record_id}{MASK_SUFFIX}"


def mask_png_bytes(grid: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray((np.asarray(grid) > 0).astype(np.uint8) * 255).save(buf, format="PNG")
    return buf.getvalue()


def save_mask(mask: SilhouetteMask, mask_dir: PathLike) -> Path:
    return atomic_write_bytes(mask_path(mask_dir, mask.record_id), mask_png_bytes(mask.grid))


def load_mask(mask_dir: PathLike, record_id: str,
              expected_size: Optional[Tuple[int, int]] = None) -> SilhouetteMask:
    return ingest_external_mask(record_id, mask_path(mask_dir, record_id), expected_size)


def write_exclusion_report(excluded: Iterable[Tuple[str, str]], path: PathLike) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["record_id", "reason"])
    writer.writerows(excluded)
    return atomic_write_text(path, buf.getvalue())


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a).astype(bool), np.asarray(b).astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum()) / float(union)
