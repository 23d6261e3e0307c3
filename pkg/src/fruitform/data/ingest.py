from __future__ import annotations

import logging
import re
from pathlib import Path
from typing import Mapping, Set

from PIL import Image, UnidentifiedImageError

from fruitform.data.records import DatasetManifest, DeformityClass, FruitKind, ImageRecord, Source
from fruitform.errors import ValidationError
from fruitform.io_utils import PathLike

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_-]+", "-", text).strip("-") or "img"


def ingest_directory(root: PathLike, fruit: FruitKind,
                     labeling: Mapping[str, DeformityClass]) -> DatasetManifest:
    """Build a Real-image manifest from ``root/<class dir>/<images>``.

    Unreadable images are skipped and listed in ``manifest.warnings``.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    fruit = FruitKind(fruit)
    missing = sorted(d for d in labeling if not (root / d).is_dir())
    if missing:
        raise ValidationError(f"missing class directories under {root}: {missing}")

    manifest = DatasetManifest(fruit=fruit)
    seen: Set[str] = set()
    for dirname in sorted(labeling):
        label = DeformityClass.parse(labeling[dirname])
        for path in sorted((root / dirname).iterdir()):
            if not path.is_file() or path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                with Image.open(path) as im:
                    im.load()
                    width, height = im.size
            except (OSError, UnidentifiedImageError) as exc:
                msg = f"{path}: unreadable image ({exc.__class__.__name__})"
                log.warning(msg)
                manifest.warnings.append(msg)
                continue
            rid = f"{_slug(dirname)}-{_slug(path.stem)}"
            if rid in seen:
                rid = f"{rid}-{path.suffix.lower().lstrip('.')}"
            seen.add(rid)
            manifest.records.append(ImageRecord(
                id=rid, fruit=fruit, label=label, source=Source.Real,
                path=str(path), width=width, height=height))
    return manifest
