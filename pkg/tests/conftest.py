"""Shared fixtures: small on-disk datasets and manifest builders."""

from pathlib import Path
from typing import Sequence

import numpy as np
import pytest
from PIL import Image

from fruitform.data import (DatasetManifest, DeformityClass, FruitKind, ImageRecord, Source,
                            stratified_split)
from fruitform.shapegen import build_procedural_dataset


def make_manifest(counts: Sequence[int], fruit: FruitKind = FruitKind.Apple,
                  prefix: str = "img") -> DatasetManifest:
    """In-memory manifest with ``counts[c]`` Real records of class ``c`` (no pixels)."""
    records = []
    for cls, n in zip(DeformityClass, counts):
        for i in range(n):
            records.append(ImageRecord(id=f"{prefix}-{cls.name}-{i:05d}", fruit=fruit, label=cls,
                                       source=Source.Real, path=f"/nonexistent/{cls.name}/{i}.png",
                                       width=8, height=8))
    return DatasetManifest(fruit=fruit, records=records)


def write_png(path: Path, arr: np.ndarray) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def image_tree(tmp_path):
    """class-named directories holding a few small random PNGs each."""
    g = np.random.default_rng(5)
    root = tmp_path / "apples"
    for cls in DeformityClass:
        for i in range(3):
            write_png(root / cls.name / f"a{i}.png", g.integers(0, 256, (12, 10, 3), dtype=np.uint8))
    return root


@pytest.fixture(scope="session")
def small_procedural(tmp_path_factory):
    """40-image uniform-background procedural set, split 80/10/10."""
    out = tmp_path_factory.mktemp("proc")
    ds = build_procedural_dataset(out, per_class=10, side=64, seed=3)
    split = stratified_split(ds.manifest, seed=0)
    return ds, split


_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def verdicts(request):
    """Criterion number -> summary line, printed again at the end of the run."""
    return request.config.stash.setdefault(_VERDICTS, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, {})
    if lines:
        terminalreporter.section("acceptance")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
