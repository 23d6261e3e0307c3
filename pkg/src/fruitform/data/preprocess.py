from __future__ import annotations

import cv2
import numpy as np
from PIL import Image, UnidentifiedImageError

from fruitform.data.records import ImageRecord
from fruitform.errors import FruitformError

DEFAULT_SIDE = 224


class PreprocessError(FruitformError):
    def __init__(self, record_id: str, cause: BaseException):
        self.record_id = record_id
        super().__init__(f"cannot preprocess record {record_id!r}: {cause}")


def letterbox(grid: np.ndarray, side: int = DEFAULT_SIDE) -> np.ndarray:
    """Aspect-preserving area resize into a ``side`` square, zero padded symmetrically.

    Works on float ``HxW`` or ``HxWxC`` arrays; the odd padding pixel goes
    to the bottom/right.
    """
    h, w = grid.shape[:2]
    scale = side / max(h, w)
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    src = grid.astype(np.float32, copy=False)
    if (nh, nw) != (h, w):
        src = cv2.resize(src, (nw, nh), interpolation=cv2.INTER_AREA)
        if grid.ndim == 3 and src.ndim == 2:
            src = src[:, :, None]
    out = np.zeros((side, side) + grid.shape[2:], dtype=np.float32)
    top, left = (side - nh) // 2, (side - nw) // 2
    out[top:top + nh, left:left + nw] = src
    return out


def preprocess_array(rgb: np.ndarray, side: int = DEFAULT_SIDE) -> np.ndarray:
    """uint8 RGB grid -> ``side x side x 3`` float32 in [0, 1]."""
    return letterbox(rgb.astype(np.float32) / 255.0, side)


def preprocess(record: ImageRecord, side: int = DEFAULT_SIDE) -> np.ndarray:
    try:
        with Image.open(record.path) as im:
            rgb = np.asarray(im.convert("RGB"))
    except (OSError, UnidentifiedImageError) as exc:
        raise PreprocessError(record.id, exc) from exc
    return preprocess_array(rgb, side)
