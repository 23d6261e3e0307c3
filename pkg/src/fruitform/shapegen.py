"""Procedural fruit-like shapes with a mirror-symmetry grading oracle.

Each shape is a polar contour ``r(theta)`` with ``theta`` measured
clockwise from straight up, so a template that is even in ``theta`` is
mirror-symmetric about the vertical axis. Deformity adds odd harmonics,
a lopsided term and local bumps, all scaled by the asymmetry ``alpha``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from fruitform.data.records import DatasetManifest, DeformityClass, FruitKind, ImageRecord, Source
from fruitform.errors import FruitformError, ValidationError
from fruitform.io_utils import PathLike
from fruitform.silhouette import SilhouetteMask, iou, save_mask

log = logging.getLogger(__name__)

N_POINTS = 256
MIN_MARGIN = 0.05
# samples scoring this close to a grade cut point are rejected, so bins are separable
DEFAULT_MARGIN = 0.005
# radial perturbation gains (fraction of radius at alpha=1)
BULGE_GAIN = 1.2
BULGE_WIDTH = 0.5
HARMONIC_GAIN = 0.03
MIN_RADIUS_FACTOR = 0.3


class ShapeTemplate(str, Enum):
    AppleLike = "AppleLike"
    MangoLike = "MangoLike"
    StrawberryLike = "StrawberryLike"


def _wrap(theta):
    return (theta + np.pi) % (2 * np.pi) - np.pi


def _template_radius(template: ShapeTemplate, theta: np.ndarray) -> np.ndarray:
    t = _wrap(theta)
    if template is ShapeTemplate.AppleLike:
        # slightly wider than tall, stem dimple on top, shallow calyx dip below
        r = (1.0 - 0.06 * np.cos(2 * t) + 0.02 * np.cos(4 * t)
             - 0.12 * np.exp(-(t / 0.32) ** 2)
             - 0.05 * np.exp(-((np.abs(t) - np.pi) / 0.3) ** 2))
    elif template is ShapeTemplate.MangoLike:
        a, b = 0.72, 1.0  # half width, half height
        ellipse = a * b / np.sqrt((a * np.cos(t)) ** 2 + (b * np.sin(t)) ** 2)
        r = ellipse * (1.0 + 0.10 * np.cos(t))
    else:
        # broad shoulders at the calyx, tapering to a tip at the bottom
        down = np.clip(-np.cos(t), 0.0, None)
        r = 0.78 + 0.10 * np.cos(2 * t) + 0.30 * down ** 3 - 0.06 * np.exp(-(t / 0.25) ** 2)
    return r / r.max()


@dataclass(frozen=True)
class DeformityParams:
    asymmetry: float = 0.0
    bump_count: int = 0
    bump_amplitude: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.asymmetry <= 1.0:
            raise ValidationError(f"asymmetry must be in [0, 1], got {self.asymmetry}")
        if self.bump_count < 0 or self.bump_amplitude < 0:
            raise ValidationError("bump_count and bump_amplitude must be non-negative")


@dataclass(frozen=True)
class GradeThresholds:
    extra: float = 0.97
    first: float = 0.93
    second: float = 0.88

    def __post_init__(self):
        cuts = (self.extra, self.first, self.second)
        if not all(0.0 < c < 1.0 for c in cuts) or not self.extra > self.first > self.second:
            raise ValidationError(f"thresholds must be strictly decreasing in (0, 1): {cuts}")

    def distance(self, score: float) -> float:
        """Distance from ``score`` to the nearest cut point."""
        return min(abs(score - c) for c in (self.extra, self.first, self.second))

    def grade(self, score: float) -> DeformityClass:
        if score >= self.extra:
            return DeformityClass.ExtraClass
        if score >= self.first:
            return DeformityClass.FirstClass
        if score >= self.second:
            return DeformityClass.SecondClass
        return DeformityClass.Ungraded


@dataclass
class ShapeProfile:
    template: ShapeTemplate
    base_radius: float
    contour: np.ndarray  # (N, 2) x right, y down, relative to the shape centre

    def bounds(self) -> Tuple[float, float, float, float]:
        x, y = self.contour[:, 0], self.contour[:, 1]
        return float(x.min()), float(y.min()), float(x.max()), float(y.max())


def gen_shape(template, params: DeformityParams, base_radius: float = 1.0,
              n_points: int = N_POINTS) -> ShapeProfile:
    template = ShapeTemplate(template)
    if n_points < 64 or n_points % 2:
        raise ValidationError("n_points must be an even number >= 64")
    half = n_points // 2
    theta = 2 * np.pi * np.arange(n_points) / n_points
    base = _template_radius(template, theta[: half + 1])
    # mirror the right half so the template is exactly even in theta
    r0 = np.concatenate([base, base[1:half][::-1]])
    x0 = np.sin(theta[: half + 1]) * base
    y0 = -np.cos(theta[: half + 1]) * base

    rng = np.random.default_rng(params.seed)
    side = rng.choice([-1.0, 1.0])
    bulge_at = side * rng.uniform(0.6, 2.5)
    bulge = BULGE_GAIN * rng.uniform(0.8, 1.0)
    harmonics = rng.normal(0.0, HARMONIC_GAIN, size=3)
    bump_at = rng.uniform(-np.pi, np.pi, size=params.bump_count)
    bump_sign = rng.choice([-1.0, 1.0], size=params.bump_count)

    tw = _wrap(theta)
    pert = bulge * np.exp(-(_wrap(tw - bulge_at) / BULGE_WIDTH) ** 2)
    pert = pert + sum(c * np.sin((k + 3) * theta) for k, c in enumerate(harmonics))
    for phi, s in zip(bump_at, bump_sign):
        pert = pert + s * params.bump_amplitude * np.exp(-(_wrap(tw - phi) / 0.35) ** 2)
    factor = np.maximum(1.0 + params.asymmetry * pert, MIN_RADIUS_FACTOR)

    if params.asymmetry == 0.0:
        xs = np.concatenate([x0, -x0[1:half][::-1]])
        ys = np.concatenate([y0, y0[1:half][::-1]])
    else:
        r = r0 * factor
        r = r / r.max()
        xs, ys = np.sin(theta) * r, -np.cos(theta) * r
    contour = np.stack([xs, ys], axis=1) * base_radius
    return ShapeProfile(template, float(base_radius), contour)


def rasterize_polygon(poly: np.ndarray, height: int, width: int) -> np.ndarray:
    """Even-odd fill: a pixel is inside when its centre is inside ``poly``."""
    poly = np.asarray(poly, dtype=np.float64)
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    out = np.zeros((height, width), dtype=np.uint8)
    centers = np.arange(width) + 0.5
    for row in range(height):
        yc = row + 0.5
        crosses = ((y0 <= yc) & (y1 > yc)) | ((y1 <= yc) & (y0 > yc))
        if not crosses.any():
            continue
        xa, ya, xb, yb = x0[crosses], y0[crosses], x1[crosses], y1[crosses]
        xi = np.sort(xa + (yc - ya) * (xb - xa) / (yb - ya))
        inside = (np.searchsorted(xi, centers, side="right") % 2) == 1
        out[row, inside] = 1
    return out


def polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y)))


def polygon_perimeter(poly: np.ndarray) -> float:
    return float(np.linalg.norm(np.roll(poly, -1, axis=0) - poly, axis=1).sum())


@dataclass(frozen=True)
class RenderStyle:
    fill: Optional[Tuple[int, int, int]] = None  # None: random fruit colour
    background: str = "uniform"  # or "noisy"
    background_color: Tuple[int, int, int] = (238, 238, 238)
    texture_amplitude: float = 10.0
    noise_sigma: float = 60.0
    seed: int = 0

    def __post_init__(self):
        if self.background not in ("uniform", "noisy"):
            raise ValidationError(f"background must be 'uniform' or 'noisy', got {self.background!r}")


FRUIT_COLORS = np.array([
    (200, 30, 35), (150, 20, 40), (110, 170, 40), (225, 185, 40),
    (235, 120, 30), (90, 130, 30), (190, 60, 90), (170, 110, 30),
], dtype=np.float64)


def contour_in_frame(profile: ShapeProfile, side: int) -> np.ndarray:
    poly = profile.contour + side / 2.0
    lo, hi = MIN_MARGIN * side, (1.0 - MIN_MARGIN) * side
    if poly.min() < lo - 1e-9 or poly.max() > hi + 1e-9:
        raise ValidationError(
            f"contour does not fit a {side}px frame with {MIN_MARGIN:.0%} margin")
    return poly


def render(profile: ShapeProfile, style: RenderStyle = RenderStyle(),
           side: int = 64, record_id: str = "") -> Tuple[np.ndarray, SilhouetteMask]:
    """Rasterize ``profile`` centred in a ``side`` square.

    Returns a uint8 RGB image and the exact ground-truth silhouette.
    """
    poly = contour_in_frame(profile, side)
    grid = rasterize_polygon(poly, side, side)
    rng = np.random.default_rng(style.seed)
    fill = (np.array(style.fill, dtype=np.float64) if style.fill is not None
            else FRUIT_COLORS[rng.integers(len(FRUIT_COLORS))] + rng.uniform(-15, 15, 3))

    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    d = np.hypot(xx - side / 2.0, yy - side / 2.0) / max(profile.base_radius, 1e-9)
    shading = 1.0 - 0.25 * np.clip(d, 0, 1) ** 2
    if style.background == "uniform":
        fruit = fill * shading[..., None] + rng.normal(0, style.texture_amplitude, (side, side, 3))
        bg = np.broadcast_to(np.array(style.background_color, dtype=np.float64), (side, side, 3))
    else:
        # background hue close to the fruit, both buried in strong pixel noise
        fruit = fill + rng.normal(0, style.noise_sigma, (side, side, 3))
        bg_mean = fill + rng.uniform(-30, 30, 3)
        bg = bg_mean + rng.normal(0, style.noise_sigma, (side, side, 3))
    rgb = np.where(grid[..., None] == 1, fruit, bg)
    rgb = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    return rgb, SilhouetteMask(record_id, grid)


# -- symmetry oracle -------------------------------------------------------

@dataclass
class SymmetryResult:
    score: float
    axis_angle: float  # radians from the +x axis (image coordinates) of the best mirror line
    degenerate: bool  # moments isotropic, vertical/horizontal axes used


DEGENERACY_TOL = 1e-3
_TIE_EPS = 1e-7


def _mirror_grid(fg: np.ndarray, cx: float, cy: float, angle: float) -> np.ndarray:
    h, w = fg.shape
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    ux, uy = np.cos(angle), np.sin(angle)
    dx, dy = xx - cx, yy - cy
    proj = dx * ux + dy * uy
    rx, ry = cx + 2 * proj * ux - dx, cy + 2 * proj * uy - dy
    out = np.zeros_like(fg)
    # points on a pixel edge sample both neighbours so the result commutes with flips
    for ex in (-_TIE_EPS, _TIE_EPS):
        for ey in (-_TIE_EPS, _TIE_EPS):
            ix, iy = np.floor(rx + ex).astype(int), np.floor(ry + ey).astype(int)
            ok = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
            hit = np.zeros_like(fg)
            hit[ok] = fg[iy[ok], ix[ok]]
            out |= hit
    return out


def symmetry_analysis(mask) -> SymmetryResult:
    """Mirror-IoU about the principal axes through the centroid.

    Both principal axes are tried and the better one is kept, since the
    bilateral axis of a wide fruit is its minor axis.
    """
    grid = mask.grid if isinstance(mask, SilhouetteMask) else np.asarray(mask)
    fg = grid.astype(bool)
    ys, xs = np.nonzero(fg)
    if len(xs) == 0:
        raise ValidationError("symmetry score of an empty mask is undefined")
    x, y = xs + 0.5, ys + 0.5
    cx, cy = x.mean(), y.mean()
    mu20 = ((x - cx) ** 2).mean()
    mu02 = ((y - cy) ** 2).mean()
    mu11 = ((x - cx) * (y - cy)).mean()
    spread = np.hypot(mu20 - mu02, 2 * mu11)
    degenerate = spread <= DEGENERACY_TOL * (mu20 + mu02)
    major = np.pi / 2 if degenerate else 0.5 * np.arctan2(2 * mu11, mu20 - mu02)
    best = None
    for angle in (major, major + np.pi / 2):
        s = iou(fg, _mirror_grid(fg, cx, cy, angle))
        if best is None or s > best[0]:
            best = (s, angle)
    return SymmetryResult(score=best[0], axis_angle=float(best[1]), degenerate=bool(degenerate))


def symmetry_score(mask) -> float:
    return symmetry_analysis(mask).score


# -- dataset builder -------------------------------------------------------

class UnfillableBinError(FruitformError):
    pass


def sample_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


@dataclass
class ProceduralDataset:
    manifest: DatasetManifest
    masks: Dict[str, SilhouetteMask]
    scores: Dict[str, float] = field(default_factory=dict)
    manifest_path: Optional[Path] = None
    mask_dir: Optional[Path] = None


def sample_shape(master_seed: int, index: int, side: int,
                 templates: Sequence[ShapeTemplate]) -> Tuple[ShapeProfile, DeformityParams]:
    s = sample_seed(master_seed, index)
    rng = np.random.default_rng(s)
    template = ShapeTemplate(templates[int(rng.integers(len(templates)))])
    params = DeformityParams(asymmetry=float(rng.uniform(0.0, 1.0)) ** 2,
                             bump_count=int(rng.integers(0, 3)),
                             bump_amplitude=0.10, seed=s)
    radius = side * float(rng.uniform(0.30, 0.36))
    return gen_shape(template, params, base_radius=radius), params


def build_procedural_dataset(out_dir: PathLike, per_class: int, side: int = 64,
                             thresholds: GradeThresholds = GradeThresholds(), seed: int = 0,
                             background: str = "uniform",
                             templates: Sequence[ShapeTemplate] = tuple(ShapeTemplate),
                             source: Source = Source.Synthetic, name: str = "procedural",
                             margin: float = DEFAULT_MARGIN,
                             max_attempts: Optional[int] = None) -> ProceduralDataset:
    """Rejection-sample shapes until every grade bin holds ``per_class`` records.

    Writes ``images/``, ``masks/`` and ``<name>.manifest.jsonl`` under
    ``out_dir``. Labels come from the measured score of the ground-truth
    mask, never from ``alpha``; shapes scoring within ``margin`` of a cut
    point are rejected.
    """
    if per_class < 1:
        raise ValidationError("per_class must be >= 1")
    out_dir = Path(out_dir)
    img_dir, mask_dir = out_dir / "images", out_dir / "masks"
    img_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)
    max_attempts = max_attempts or 200 * per_class * len(DeformityClass)

    counts = {c: 0 for c in DeformityClass}
    manifest = DatasetManifest(fruit=FruitKind.Procedural)
    masks: Dict[str, SilhouetteMask] = {}
    scores: Dict[str, float] = {}
    index = 0
    while min(counts.values()) < per_class:
        if index >= max_attempts:
            short = {c.name: per_class - n for c, n in counts.items() if n < per_class}
            raise UnfillableBinError(
                f"could not fill grade bins after {max_attempts} attempts (missing {short}); "
                "adjust the grade thresholds")
        profile, params = sample_shape(seed, index, side, templates)
        index += 1
        grid = rasterize_polygon(contour_in_frame(profile, side), side, side)
        score = symmetry_score(grid)
        label = thresholds.grade(score)
        if counts[label] >= per_class or thresholds.distance(score) < margin:
            continue
        rid = f"proc-{seed}-{index - 1:06d}"
        rgb, mask = render(profile, RenderStyle(background=background, seed=params.seed),
                           side=side, record_id=rid)
        path = img_dir / f"{rid}.png"
        Image.fromarray(rgb).save(path, format="PNG")
        save_mask(mask, mask_dir)
        manifest.records.append(ImageRecord(
            id=rid, fruit=FruitKind.Procedural, label=label, source=source,
            path=str(path), width=side, height=side))
        masks[rid] = mask
        scores[rid] = score
        counts[label] += 1
    log.info("procedural dataset: %d records from %d attempts", len(manifest.records), index)
    manifest_path = manifest.save(out_dir / f"{name}.manifest.jsonl")
    return ProceduralDataset(manifest, masks, scores, manifest_path, mask_dir)
