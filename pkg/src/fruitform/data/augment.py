"""Lossless dihedral augmentation and class balancing.

Pixel grids are indexed ``[row, col]``. ``rot90`` is a quarter turn
clockwise: the output pixel at column x, row y is the input pixel at
column y, row W-1-x.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from math import ceil
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
from PIL import Image

from fruitform.data.records import (DatasetManifest, DeformityClass, ImageRecord, Source)
from fruitform.errors import FruitformError, ValidationError
from fruitform.io_utils import PathLike

log = logging.getLogger(__name__)

MAX_FACTOR = 8
DEFAULT_TARGET_PER_CLASS = 5000


def _rot90(a):
    return np.rot90(a, k=-1)


def _rot270(a):
    return np.rot90(a, k=1)


def _hflip(a):
    return a[:, ::-1]


TRANSFORMS: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "identity": lambda a: a,
    "rot90": _rot90,
    "rot180": lambda a: a[::-1, ::-1],
    "rot270": _rot270,
    "hflip": _hflip,
    "vflip": lambda a: a[::-1, :],
    "hflip_rot90": lambda a: _hflip(_rot90(a)),
    "hflip_rot270": lambda a: _hflip(_rot270(a)),
}

INVERSES = {
    "identity": "identity",
    "rot90": "rot270",
    "rot270": "rot90",
    "rot180": "rot180",
    "hflip": "hflip",
    "vflip": "vflip",
    "hflip_rot90": "hflip_rot90",
    "hflip_rot270": "hflip_rot270",
}

# variant order used when planning; identity is the source itself
VARIANT_TAGS = ("rot90", "rot180", "rot270", "hflip", "vflip", "hflip_rot90", "hflip_rot270")


def apply_transform(grid: np.ndarray, tag: str) -> np.ndarray:
    try:
        fn = TRANSFORMS[tag]
    except KeyError:
        raise ValidationError(f"unknown transform tag {tag!r}") from None
    return np.ascontiguousarray(fn(grid))


@dataclass
class AugmentationPlan:
    variants: Dict[str, List[str]] = field(default_factory=dict)
    target_per_class: int = DEFAULT_TARGET_PER_CLASS
    planned_per_class: Dict[DeformityClass, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(len(v) for v in self.variants.values())

    def validate(self) -> None:
        for rid, tags in self.variants.items():
            bad = [t for t in tags if t not in VARIANT_TAGS]
            if bad:
                raise ValidationError(f"plan for {rid!r} has disallowed tags {bad}")
            if len(set(tags)) != len(tags):
                raise ValidationError(f"plan for {rid!r} repeats a tag: {tags}")
            if len(tags) + 1 > MAX_FACTOR:
                raise ValidationError(f"plan for {rid!r} exceeds {MAX_FACTOR} variants")

    def to_dict(self) -> dict:
        return {
            "target_per_class": self.target_per_class,
            "planned_per_class": {c.name: n for c, n in self.planned_per_class.items()},
            "variants": self.variants,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationPlan":
        plan = cls(variants={k: list(v) for k, v in d["variants"].items()},
                   target_per_class=int(d["target_per_class"]),
                   planned_per_class={DeformityClass.parse(k): int(v)
                                      for k, v in d.get("planned_per_class", {}).items()})
        plan.validate()
        return plan


def plan_balancing(manifest: DatasetManifest,
                   target_per_class: int = DEFAULT_TARGET_PER_CLASS) -> AugmentationPlan:
    """Plan variants so every class reaches exactly ``target_per_class``.

    Needed variants are spread evenly over source records in manifest
    order: the first ``needed % n`` sources get one extra.
    """
    if target_per_class < 1:
        raise ValidationError("target_per_class must be positive")
    if any(r.source is Source.Augmented for r in manifest.records):
        raise ValidationError("manifest already contains Augmented records; plan from the unaugmented manifest")

    by_class: Dict[DeformityClass, List[ImageRecord]] = {c: [] for c in DeformityClass}
    for r in manifest.records:
        by_class[r.label].append(r)

    short = []
    for cls, recs in by_class.items():
        need_sources = ceil(target_per_class / MAX_FACTOR)
        if len(recs) < need_sources:
            short.append(f"{cls.name}: {len(recs)} sources, needs {need_sources} "
                         f"(short by {need_sources - len(recs)})")
    if short:
        raise ValidationError("classes too small to balance at 8x: " + "; ".join(short))

    plan = AugmentationPlan(target_per_class=target_per_class)
    for cls, recs in by_class.items():
        needed = target_per_class - len(recs)
        if needed <= 0:
            if needed < 0:
                log.warning("%s has %d records, above target %d; left as is",
                            cls.name, len(recs), target_per_class)
            plan.planned_per_class[cls] = 0
            continue
        base, extra = divmod(needed, len(recs))
        for i, rec in enumerate(recs):
            k = base + (1 if i < extra else 0)
            if k:
                plan.variants[rec.id] = list(VARIANT_TAGS[:k])
        plan.planned_per_class[cls] = needed
    plan.validate()
    return plan


def child_id(parent_id: str, tag: str) -> str:
    return f"{parent_id}__{tag}"


def load_rgb(path: PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def apply_augmentation(manifest: DatasetManifest, plan: AugmentationPlan,
                       out_dir: PathLike) -> DatasetManifest:
    """Write planned variants as PNGs under ``out_dir`` and append their records.

    Children inherit the parent's split when the manifest is split.
    """
    plan.validate()
    out_dir = Path(out_dir)
    parents = manifest.by_id()
    unknown = [rid for rid in plan.variants if rid not in parents]
    if unknown:
        raise ValidationError(f"plan references unknown records: {unknown[:5]}")

    new_records: List[ImageRecord] = []
    new_splits = dict(manifest.splits)
    written: List[str] = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for rid, tags in plan.variants.items():
            parent = parents[rid]
            pixels = load_rgb(parent.path)
            for tag in tags:
                cid = child_id(rid, tag)
                child = apply_transform(pixels, tag)
                dest = out_dir / f"{cid}.png"
                Image.fromarray(child).save(dest, format="PNG")
                written.append(str(dest))
                new_records.append(ImageRecord(
                    id=cid, fruit=parent.fruit, label=parent.label, source=Source.Augmented,
                    path=str(dest), width=child.shape[1], height=child.shape[0],
                    parent_id=rid, transform_tag=tag))
                if rid in manifest.splits:
                    new_splits[cid] = manifest.splits[rid]
    except OSError as exc:
        raise AugmentationWriteError(written, exc) from exc

    out = manifest.with_records(manifest.records + new_records, splits=new_splits)
    out.validate()
    return out


class AugmentationWriteError(FruitformError, OSError):
    def __init__(self, written: List[str], cause: Optional[BaseException] = None):
        self.written = written
        super().__init__(f"augmentation aborted after writing {len(written)} files: {cause}")
