"""Keypoint-density region proposal with size tiers and SRM-guided keypoints.

Keypoints are ``(K, 2)`` float arrays of ``(x, y)`` image coordinates.
Regions are ``(R, 4)`` arrays of ``(x_min, y_min, x_max, y_max)``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .dataset import Scene
from .geometry import BoundingBox, ImageExtent, NUM_ZONES, zone_rects
from .srm import SpatialRelationModel, mirror_lr

DEFAULT_BETA = 15
DEFAULT_OVERSAMPLE = 20
# Remainders closer than this are treated as ties (float noise in weights).
_TIE_EPS = 1e-9


@dataclass(frozen=True)
class SizeTier:
    name: str
    min_frac: float
    max_frac: float

    def __post_init__(self):
        if not 0 < self.min_frac < self.max_frac <= 0.99:
            raise ValueError(f"tier {self.name}: need 0 < min_frac < max_frac <= 0.99")

    def axis_bounds(self, length: int) -> tuple[float, float]:
        return self.min_frac * length, self.max_frac * length


LARGE = SizeTier("LARGE", 0.40, 0.99)
MEDIUM = SizeTier("MEDIUM", 0.10, 0.64)
SMALL = SizeTier("SMALL", 0.02, 0.16)
DEFAULT_TIERS = (LARGE, MEDIUM, SMALL)
DEFAULT_BUDGETS = {"LARGE": 50, "MEDIUM": 150, "SMALL": 300}


@dataclass
class RegionProposalSet:
    regions: np.ndarray
    tier: SizeTier
    source: str
    keypoint_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    fallback: bool = False

    def __len__(self):
        return len(self.regions)

    def boxes(self) -> list[BoundingBox]:
        return [BoundingBox(*map(float, r)) for r in self.regions]


def allocate_counts(total: int, weights: Sequence[float]) -> np.ndarray:
    """Largest-remainder apportionment of ``total`` in proportion to ``weights``.

    The result always sums to ``total``. Equal remainders go to the lower
    index first.
    """
    if total < 0:
        raise ValueError("total must be non-negative")
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    s = w.sum()
    if s <= 0:
        raise ValueError("weights must not all be zero")
    quotas = total * w / s
    base = np.floor(quotas + _TIE_EPS).astype(np.int64)
    base = np.minimum(base, np.ceil(quotas).astype(np.int64))
    remainders = np.clip(quotas - base, 0.0, None)
    extra = int(total - base.sum())
    if extra > 0:
        keyed = np.round(remainders / _TIE_EPS) * _TIE_EPS
        order = np.lexsort((np.arange(len(w)), -keyed))
        base[order[:extra]] += 1
    elif extra < 0:
        # Only reachable through float slop on huge totals.
        order = np.lexsort((np.arange(len(w)), remainders))
        for i in order[: -extra]:
            base[i] -= 1
    return base


# ---------------------------------------------------------------------------
# SRM-guided keypoints
# ---------------------------------------------------------------------------

@dataclass
class KeypointPlan:
    """Per-(anchor, class) keypoint allocation over the anchor's zones."""

    anchor_index: int
    anchor_class: str
    target_class: str
    total: int
    zone_counts: np.ndarray
    zone_rects: list


class _Anchor(Protocol):
    class_label: str
    box: BoundingBox


def plan_srm_keypoints(srm: SpatialRelationModel, confirmed: Sequence[_Anchor], img: ImageExtent,
                       beta: int = DEFAULT_BETA) -> list[KeypointPlan]:
    if beta < 1:
        raise ValueError("beta must be >= 1")
    plans = []
    for k, det in enumerate(confirmed):
        rects = zone_rects(det.box, img)
        nonempty = np.array([r is not None for r in rects])
        areas = np.array([(r[2] - r[0]) * (r[3] - r[1]) if r else 0.0 for r in rects])
        for target in srm.classes:
            total = beta * srm.co_occurrence(det.class_label, target)
            if total == 0:
                continue
            weights = mirror_lr(srm.spatial_dist(det.class_label, target)) * nonempty
            if weights.sum() <= 0:
                # All mass fell in zones cut off by the image border.
                weights = areas
            counts = allocate_counts(total, weights)
            plans.append(KeypointPlan(k, det.class_label, target, total, counts, rects))
    return plans


def sample_plan(plan: KeypointPlan, rng: np.random.Generator) -> np.ndarray:
    chunks = []
    for z in range(NUM_ZONES):
        c = int(plan.zone_counts[z])
        if c == 0:
            continue
        x0, y0, x1, y1 = plan.zone_rects[z]
        u = rng.random((c, 2))
        chunks.append(np.column_stack((x0 + u[:, 0] * (x1 - x0), y0 + u[:, 1] * (y1 - y0))))
    return np.concatenate(chunks) if chunks else np.zeros((0, 2))


def gen_srm_keypoints(srm: SpatialRelationModel, confirmed: Sequence[_Anchor], img: ImageExtent,
                      beta: int = DEFAULT_BETA, rng: np.random.Generator | None = None) -> np.ndarray:
    """Keypoints placed around confirmed detections where related classes tend to be.

    For each confirmed detection of class A and each class C, emits
    ``beta * co_occurrence(A, C)`` keypoints split across the zones of A's
    box in proportion to the left/right-mirrored spatial distribution.
    """
    rng = rng if rng is not None else np.random.default_rng()
    plans = plan_srm_keypoints(srm, confirmed, img, beta)
    if not plans:
        return np.zeros((0, 2))
    return np.concatenate([sample_plan(p, rng) for p in plans])


# ---------------------------------------------------------------------------
# Window sampling and keypoint-density ranking
# ---------------------------------------------------------------------------

def _sample_axis(rng, n, length, tier: SizeTier) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = tier.axis_bounds(length)
    ilo, ihi = math.ceil(lo - 1e-9), math.floor(hi + 1e-9)
    if ilo >= 1 and ilo <= ihi:
        size = rng.integers(ilo, ihi + 1, size=n).astype(float)
        start = np.floor(rng.random(n) * (length - size + 1)).astype(float)
    else:
        size = lo + rng.random(n) * (hi - lo)
        start = rng.random(n) * (length - size)
    return start, start + size


def sample_windows(rng: np.random.Generator, n: int, tier: SizeTier, img: ImageExtent) -> np.ndarray:
    """``n`` windows with per-axis sizes uniform within the tier bounds.

    Widths and heights are drawn independently. Sizes and offsets are
    integral whenever the tier admits an integral size for that axis.
    """
    x0, x1 = _sample_axis(rng, n, img.width, tier)
    y0, y1 = _sample_axis(rng, n, img.height, tier)
    return np.column_stack((x0, y0, x1, y1))


def count_in_windows(keypoints: np.ndarray, windows: np.ndarray, img: ImageExtent) -> np.ndarray:
    """Number of keypoints inside each window.

    Windows are treated as half-open ``[x_min, x_max) x [y_min, y_max)``
    except that the image's right and bottom edges are inclusive.
    """
    kp = np.asarray(keypoints, dtype=float).reshape(-1, 2)
    win = np.asarray(windows, dtype=float).reshape(-1, 4)
    if len(kp) == 0 or len(win) == 0:
        return np.zeros(len(win), dtype=np.int64)
    if np.all(win == np.round(win)):
        # Integral windows: exact counts from a summed-area table.
        cx = np.clip(np.floor(kp[:, 0]).astype(np.int64), 0, img.width - 1)
        cy = np.clip(np.floor(kp[:, 1]).astype(np.int64), 0, img.height - 1)
        hist = np.zeros((img.height + 1, img.width + 1), dtype=np.int64)
        np.add.at(hist, (cy + 1, cx + 1), 1)
        sat = hist.cumsum(0).cumsum(1)
        x0, y0, x1, y1 = (win[:, i].astype(np.int64) for i in range(4))
        return sat[y1, x1] - sat[y0, x1] - sat[y1, x0] + sat[y0, x0]
    W, H = float(img.width), float(img.height)
    out = np.empty(len(win), dtype=np.int64)
    for s in range(0, len(win), 512):
        w = win[s : s + 512]
        inx = (kp[None, :, 0] >= w[:, None, 0]) & (
            (kp[None, :, 0] < w[:, None, 2]) | ((w[:, None, 2] >= W) & (kp[None, :, 0] <= W)))
        iny = (kp[None, :, 1] >= w[:, None, 1]) & (
            (kp[None, :, 1] < w[:, None, 3]) | ((w[:, None, 3] >= H) & (kp[None, :, 1] <= H)))
        out[s : s + 512] = (inx & iny).sum(axis=1)
    return out


def rank_windows(windows: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Order by count desc, then density desc, then generation order."""
    areas = (windows[:, 2] - windows[:, 0]) * (windows[:, 3] - windows[:, 1])
    density = counts / areas
    return np.lexsort((np.arange(len(windows)), -density, -counts))


def gen_kdrp_regions(keypoints: np.ndarray, tier: SizeTier, num_regions: int, img: ImageExtent,
                     rng: np.random.Generator, oversample: int = DEFAULT_OVERSAMPLE,
                     source: str = "KDRP") -> RegionProposalSet:
    """Top ``num_regions`` of ``oversample * num_regions`` random windows by keypoint count."""
    if num_regions < 1:
        raise ValueError("num_regions must be >= 1")
    if oversample < 1:
        raise ValueError("oversample must be >= 1")
    candidates = sample_windows(rng, oversample * num_regions, tier, img)
    kp = np.asarray(keypoints, dtype=float).reshape(-1, 2)
    counts = count_in_windows(kp, candidates, img)
    top = rank_windows(candidates, counts)[:num_regions]
    return RegionProposalSet(candidates[top], tier, source, counts[top], fallback=len(kp) == 0)


# ---------------------------------------------------------------------------
# Keypoint sources
# ---------------------------------------------------------------------------

class KeypointSource(Protocol):
    def __call__(self, scene: Scene, rng: np.random.Generator) -> np.ndarray: ...


@dataclass
class UniformKeypoints:
    count: int = 200

    def __call__(self, scene: Scene, rng: np.random.Generator) -> np.ndarray:
        u = rng.random((self.count, 2))
        return u * [scene.extent.width, scene.extent.height]


@dataclass
class GroundTruthKeypoints:
    """Simulated interest points clustered on ground-truth objects.

    Each object gets ``per_object`` points drawn uniformly in its box and
    jittered by Gaussian noise of ``spread`` times the box side. A further
    ``background_fraction`` of the total is spread uniformly over the image.
    """

    per_object: int = 40
    spread: float = 0.0
    background_fraction: float = 0.2

    def __post_init__(self):
        if not 0 <= self.background_fraction < 1:
            raise ValueError("background_fraction must be in [0, 1)")
        if self.spread < 0 or self.per_object < 0:
            raise ValueError("spread and per_object must be non-negative")

    def __call__(self, scene: Scene, rng: np.random.Generator) -> np.ndarray:
        W, H = scene.extent.width, scene.extent.height
        chunks = []
        for obj in scene.objects:
            b = obj.box
            u = rng.random((self.per_object, 2))
            pts = np.column_stack((b.x_min + u[:, 0] * b.width, b.y_min + u[:, 1] * b.height))
            if self.spread > 0:
                pts += rng.standard_normal(pts.shape) * self.spread * np.array([b.width, b.height])
            chunks.append(pts)
        n_obj = self.per_object * len(scene.objects)
        n_bg = int(round(n_obj * self.background_fraction / (1 - self.background_fraction))) if n_obj else 0
        if n_bg:
            chunks.append(rng.random((n_bg, 2)) * [W, H])
        if not chunks:
            return np.zeros((0, 2))
        pts = np.concatenate(chunks)
        np.clip(pts[:, 0], 0, W, out=pts[:, 0])
        np.clip(pts[:, 1], 0, H, out=pts[:, 1])
        return pts


def write_keypoint_file(path: str | os.PathLike, keypoints_by_scene: dict[str, np.ndarray]) -> None:
    """Write keypoints as blocks: a ``> scene_id`` header line, then ``x y`` lines."""
    lines = []
    for scene_id in sorted(keypoints_by_scene):
        lines.append(f"> {scene_id}")
        lines.extend(f"{x!r} {y!r}" for x, y in np.asarray(keypoints_by_scene[scene_id], dtype=float).tolist())
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_keypoint_file(path: str | os.PathLike) -> dict[str, np.ndarray]:
    out: dict[str, list] = {}
    current = None
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith(">"):
            current = line[1:].strip()
            out.setdefault(current, [])
            continue
        if current is None:
            raise ValueError(f"{path}:{lineno}: keypoint before any '> scene_id' header")
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'x y', got {line!r}")
        out[current].append((float(parts[0]), float(parts[1])))
    return {k: np.asarray(v, dtype=float).reshape(-1, 2) for k, v in out.items()}


@dataclass
class FileKeypoints:
    path: str
    _cache: dict = field(default=None, repr=False)

    def __call__(self, scene: Scene, rng: np.random.Generator) -> np.ndarray:
        if self._cache is None:
            self._cache = read_keypoint_file(self.path)
        pts = self._cache.get(scene.scene_id, np.zeros((0, 2)))
        W, H = scene.extent.width, scene.extent.height
        inside = (pts[:, 0] >= 0) & (pts[:, 0] <= W) & (pts[:, 1] >= 0) & (pts[:, 1] <= H)
        return pts[inside]


KEYPOINT_SOURCES: dict[str, Callable[..., KeypointSource]] = {
    "uniform": UniformKeypoints,
    "ground-truth": GroundTruthKeypoints,
    "file": FileKeypoints,
}


def make_keypoint_source(name: str, **options) -> KeypointSource:
    try:
        factory = KEYPOINT_SOURCES[name]
    except KeyError:
        raise ValueError(f"unknown keypoint source {name!r}; expected one of {sorted(KEYPOINT_SOURCES)}") from None
    return factory(**options)
