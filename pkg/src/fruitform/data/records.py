"""Class taxonomy, image records and the JSON-lines manifest format."""

from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from pathlib import Path
from typing import Dict, Iterable, List, Optional

from fruitform.errors import ValidationError
from fruitform.io_utils import PathLike, atomic_write_text, sha256_bytes

MANIFEST_VERSION = 1
MANIFEST_SUFFIX = ".manifest.jsonl"
RECORD_KEYS = ("id", "fruit", "label", "source", "parent_id", "transform_tag",
               "path", "width", "height", "split")


class DeformityClass(IntEnum):
    """Shape grade, ordered from best to worst. Member names are the wire names."""

    ExtraClass = 0
    FirstClass = 1
    SecondClass = 2
    Ungraded = 3

    @classmethod
    def parse(cls, value) -> "DeformityClass":
        if isinstance(value, cls):
            return value
        if isinstance(value, int):
            return cls(value)
        try:
            return cls[str(value)]
        except KeyError:
            raise ValidationError(f"unknown deformity class {value!r}") from None


CLASS_NAMES = [c.name for c in DeformityClass]
NUM_CLASSES = len(DeformityClass)


class FruitKind(str, Enum):
    Apple = "Apple"
    Mango = "Mango"
    Strawberry = "Strawberry"
    Procedural = "Procedural"


class Source(str, Enum):
    Real = "Real"
    Synthetic = "Synthetic"
    Augmented = "Augmented"


class Split(str, Enum):
    Train = "Train"
    Val = "Val"
    Test = "Test"


def _parse_enum(enum_cls, value):
    try:
        return enum_cls(value)
    except ValueError:
        raise ValidationError(f"invalid {enum_cls.__name__}: {value!r}") from None


@dataclass(frozen=True)
class ImageRecord:
    id: str
    fruit: FruitKind
    label: DeformityClass
    source: Source
    path: str
    width: int
    height: int
    parent_id: Optional[str] = None
    transform_tag: Optional[str] = None

    def __post_init__(self):
        augmented = self.source is Source.Augmented
        linked = self.parent_id is not None and self.transform_tag is not None
        if augmented != linked:
            raise ValidationError(
                f"record {self.id!r}: Augmented records need parent_id and transform_tag, "
                "other sources must have neither")


@dataclass
class DatasetManifest:
    """Ordered records plus their split assignment.

    ``splits`` may be empty (freshly ingested data) or must cover every
    record. ``class_counts`` is always recomputed from the records.
    """

    fruit: FruitKind
    records: List[ImageRecord] = field(default_factory=list)
    splits: Dict[str, Split] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    @property
    def class_counts(self) -> Dict[DeformityClass, int]:
        counts = Counter(r.label for r in self.records)
        return {c: counts.get(c, 0) for c in DeformityClass}

    @property
    def classes(self) -> List[str]:
        return list(CLASS_NAMES)

    def by_id(self) -> Dict[str, ImageRecord]:
        return {r.id: r for r in self.records}

    def split_records(self, split: Split) -> List[ImageRecord]:
        split = _parse_enum(Split, split)
        return [r for r in self.records if self.splits.get(r.id) is split]

    def validate(self) -> None:
        ids = [r.id for r in self.records]
        dupes = sorted(k for k, v in Counter(ids).items() if v > 1)
        if dupes:
            raise ValidationError(f"duplicate record ids: {dupes[:5]}")
        known = set(ids)
        dangling = [r.id for r in self.records if r.parent_id is not None and r.parent_id not in known]
        if dangling:
            raise ValidationError(f"parent_id does not resolve for records: {dangling[:5]}")
        if self.splits:
            missing = [i for i in ids if i not in self.splits]
            extra = sorted(set(self.splits) - known)
            if missing or extra:
                raise ValidationError(
                    f"split map inconsistent: {len(missing)} unassigned, {len(extra)} unknown ids")

    def with_records(self, records: Iterable[ImageRecord], splits=None) -> "DatasetManifest":
        return replace(self, records=list(records),
                       splits=dict(self.splits if splits is None else splits),
                       warnings=list(self.warnings))

    # -- serialization -------------------------------------------------
    def to_jsonl(self, base_dir: Optional[PathLike] = None) -> str:
        header = {"version": MANIFEST_VERSION, "fruit": self.fruit.value, "classes": self.classes}
        lines = [json.dumps(header)]
        for r in self.records:
            split = self.splits.get(r.id)
            row = {
                "id": r.id,
                "fruit": r.fruit.value,
                "label": r.label.name,
                "source": r.source.value,
                "parent_id": r.parent_id,
                "transform_tag": r.transform_tag,
                "path": _relativize(r.path, base_dir),
                "width": r.width,
                "height": r.height,
                "split": split.value if split is not None else None,
            }
            lines.append(json.dumps(row))
        return "\n".join(lines) + "\n"

    def content_hash(self) -> str:
        """Hash over records and splits, independent of where files live."""
        rows = []
        for r in self.records:
            split = self.splits.get(r.id)
            rows.append([r.id, r.fruit.value, r.label.name, r.source.value, r.parent_id,
                         r.transform_tag, Path(r.path).name, r.width, r.height,
                         split.value if split else None])
        return sha256_bytes(json.dumps(rows).encode())

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        self.validate()
        return atomic_write_text(path, self.to_jsonl(base_dir=path.parent))

    @classmethod
    def load(cls, path: PathLike) -> "DatasetManifest":
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            lines = [ln for ln in fh.read().splitlines() if ln.strip()]
        if not lines:
            raise ValidationError(f"{path}: empty manifest")
        header = json.loads(lines[0])
        if header.get("version") != MANIFEST_VERSION:
            raise ValidationError(f"{path}: unsupported manifest version {header.get('version')!r}")
        if header.get("classes") != CLASS_NAMES:
            raise ValidationError(f"{path}: class taxonomy {header.get('classes')} != {CLASS_NAMES}")
        manifest = cls(fruit=_parse_enum(FruitKind, header["fruit"]))
        for n, line in enumerate(lines[1:], start=2):
            row = json.loads(line)
            if set(row) != set(RECORD_KEYS):
                raise ValidationError(f"{path}:{n}: record keys {sorted(row)} != {sorted(RECORD_KEYS)}")
            rec_path = row["path"]
            if not os.path.isabs(rec_path):
                rec_path = str(path.parent / rec_path)
            manifest.records.append(ImageRecord(
                id=row["id"],
                fruit=_parse_enum(FruitKind, row["fruit"]),
                label=DeformityClass.parse(row["label"]),
                source=_parse_enum(Source, row["source"]),
                path=rec_path,
                width=int(row["width"]),
                height=int(row["height"]),
                parent_id=row["parent_id"],
                transform_tag=row["transform_tag"],
            ))
            if row["split"] is not None:
                manifest.splits[row["id"]] = _parse_enum(Split, row["split"])
        manifest.validate()
        return manifest


def _relativize(p: str, base_dir: Optional[PathLike]) -> str:
    if base_dir is None:
        return str(p)
    try:
        return Path(os.path.abspath(p)).relative_to(os.path.abspath(base_dir)).as_posix()
    except ValueError:
        return os.path.abspath(p)
