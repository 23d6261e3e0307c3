"""Silhouette extraction, external mask ingest and quality filtering."""

from collections import deque

import numpy as np
import pytest
from PIL import Image

from fruitform import silhouette as sil
from fruitform.errors import ValidationError
from fruitform.shapegen import DeformityParams, RenderStyle, gen_shape, render


def flood_components(grid):
    """Brute-force 4-connected labelling; returns a list of pixel sets."""
    grid = np.asarray(grid).astype(bool)
    seen = np.zeros_like(grid)
    comps = []
    h, w = grid.shape
    for y0 in range(h):
        for x0 in range(w):
            if not grid[y0, x0] or seen[y0, x0]:
                continue
            comp, queue = set(), deque([(y0, x0)])
            seen[y0, x0] = True
            while queue:
                y, x = queue.popleft()
                comp.add((y, x))
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w and grid[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((ny, nx))
            comps.append(comp)
    return comps


def disc(h, w, cx, cy, r):
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    return ((xx - cx) ** 2 + (yy - cy) ** 2 <= r * r).astype(np.uint8)


def two_color(mask, fg=(255, 255, 255), bg=(0, 0, 0)):
    return np.where(mask[..., None] == 1, np.array(fg, np.uint8), np.array(bg, np.uint8))


class TestBuiltinSegmenter:
    def test_white_disc_exact(self):
        d = disc(64, 64, 32, 32, 20)
        m = sil.segment_uniform_background(two_color(d), record_id="d")
        assert m.passed
        assert np.array_equal(m.grid, d)
        # pixel count vs continuous area within the boundary band 2*pi*r*1px
        assert abs(m.grid.sum() - np.pi * 20 ** 2) <= 2 * np.pi * 20
        assert m.area_fraction == pytest.approx(d.sum() / 64 ** 2)

    def test_speck_removed(self):
        d = disc(64, 64, 30, 30, 15)
        noisy = d.copy()
        noisy[60, 60:63] = 1
        m = sil.segment_uniform_background(two_color(noisy))
        comps = flood_components(noisy)
        largest = max(comps, key=len)
        oracle = np.zeros_like(noisy)
        for y, x in largest:
            oracle[y, x] = 1
        assert len(comps) == 2
        assert np.array_equal(m.grid, oracle)

    def test_annulus_hole_filled(self):
        d = disc(64, 64, 32, 32, 20)
        ring = d & (1 - disc(64, 64, 32, 32, 8))
        m = sil.segment_uniform_background(two_color(ring))
        assert np.array_equal(m.grid, d)

    def test_noisy_background_fails(self, rng):
        rgb = rng.integers(0, 256, (48, 48, 3), dtype=np.uint8)
        m = sil.segment_uniform_background(rgb, record_id="n")
        assert not m.passed and m.reason == "non-uniform background"

    def test_truncated_object(self):
        # a disc cut off by the left edge over 30 of its 40 rows
        grid = disc(40, 40, 2, 20, 15)
        assert grid[:, 0].mean() > 0.5 and 1 - grid[[0, -1]].mean() > 0.6
        m = sil.segment_uniform_background(two_color(grid))
        assert m.reason == "truncated object"
        assert sil.segment_uniform_background(two_color(disc(40, 40, 20, 20, 12))).passed

    def test_render_recovery(self):
        prof = gen_shape("AppleLike", DeformityParams(0.3, 1, 0.1, seed=4), base_radius=20)
        rgb, truth = render(prof, RenderStyle(seed=4), side=64)
        m = sil.segment_uniform_background(rgb)
        assert sil.iou(m.grid, truth.grid) >= 0.98


class TestExternalMasks:
    def test_two_valued_identity(self, tmp_path):
        d = disc(32, 40, 20, 16, 10)
        path = tmp_path / "a.mask.png"
        Image.fromarray(d * 255).save(path)
        m = sil.ingest_external_mask("a", path, expected_size=(40, 32))
        assert np.array_equal(m.grid, d)

    def test_threshold_128(self):
        gray = np.zeros((20, 20), np.uint8)
        gray[5:15, 5:15] = 200
        gray[5:15, 14] = np.array([120, 127, 128, 129, 135, 120, 127, 128, 129, 135])
        m = sil.mask_from_grayscale(gray)
        assert m.grid[5:15, 14].tolist() == [0, 0, 1, 1, 1, 0, 0, 1, 1, 1]

    def test_largest_blob_kept(self):
        gray = np.zeros((60, 60), np.uint8)
        gray[2:22, 2:22] = 255  # 400 px
        gray[40:46, 40:45] = 255  # 30 px
        m = sil.mask_from_grayscale(gray)
        comps = flood_components(gray >= 128)
        assert sorted(len(c) for c in comps) == [30, 400]
        assert m.grid.sum() == 400 and m.grid[10, 10] == 1 and m.grid[42, 42] == 0

    def test_size_mismatch(self, tmp_path):
        path = tmp_path / "b.mask.png"
        Image.fromarray(np.zeros((10, 10), np.uint8)).save(path)
        with pytest.raises(ValidationError, match="10x10"):
            sil.ingest_external_mask("b", path, expected_size=(12, 10))

    def test_blank_mask_fails(self):
        assert sil.mask_from_grayscale(np.zeros((8, 8), np.uint8)).reason == "degenerate mask"

    def test_save_load_roundtrip(self, tmp_path):
        d = disc(16, 16, 8, 8, 5)
        sil.save_mask(sil.SilhouetteMask("r-1", d), tmp_path)
        assert (tmp_path / "r-1.mask.png").exists()
        assert np.array_equal(sil.load_mask(tmp_path, "r-1", (16, 16)).grid, d)


class TestQualityFilter:
    def test_all_pass(self):
        masks = [sil.SilhouetteMask(str(i), disc(32, 32, 16, 16, 8)) for i in range(5)]
        kept, excluded = sil.quality_filter(masks)
        assert len(kept) == 5 and excluded == []

    def test_tiny_area_excluded(self):
        grid = np.zeros((50, 50), np.uint8)
        grid[:5, :10] = 1  # 50 px = 0.02
        kept, excluded = sil.quality_filter([sil.SilhouetteMask("t", grid)])
        assert kept == [] and excluded == [("t", "area out of range")]

    def test_planted_faults(self):
        masks = []
        for i in range(100):
            prof = gen_shape("MangoLike", DeformityParams(0.2, 0, seed=i), base_radius=20)
            _, m = render(prof, RenderStyle(seed=i), side=64, record_id=f"p{i}")
            masks.append(m)
        planted = {"p7", "p42", "p99"}
        masks = [sil.SilhouetteMask(m.record_id, np.zeros_like(m.grid), "empty foreground")
                 if m.record_id in planted else m for m in masks]
        kept, excluded = sil.quality_filter(masks)
        assert {rid for rid, _ in excluded} == planted and len(kept) == 97

    def test_report_written_when_empty(self, tmp_path):
        path = sil.write_exclusion_report([], tmp_path / "r.csv")
        assert path.read_text().splitlines() == ["record_id,reason"]


def test_iou_basics():
    a = np.zeros((4, 4), np.uint8)
    b = a.copy()
    a[:2] = 1
    b[1:3] = 1
    assert sil.iou(a, b) == pytest.approx(4 / 12)
    assert sil.iou(a, a) == 1.0
