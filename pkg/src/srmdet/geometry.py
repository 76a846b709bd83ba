"""Axis-aligned box arithmetic and the nine-zone grid around an anchor box.

Zones are indexed row-major, top row first::

    Z0 | Z1 | Z2
    ---+----+---
    Z3 | Z4 | Z5
    ---+----+---
    Z6 | Z7 | Z8

Z4 is the anchor itself. The grid is the 3x3 partition of the image
``[0, width] x [0, height]`` induced by extending the anchor's edges, so
zones touching the image border are bounded and may be empty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

NUM_ZONES = 9
ZONE_NAMES = ("Z0", "Z1", "Z2", "Z3", "Z4", "Z5", "Z6", "Z7", "Z8")
CENTER_ZONE = 4

# Permutation applied by reflecting the scene about the anchor's vertical axis.
MIRROR_PERMUTATION = (2, 1, 0, 5, 4, 3, 8, 7, 6)


class GeometryError(ValueError):
    """Raised for degenerate boxes or boxes lying outside the image."""


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise GeometryError(f"non-finite box coordinates {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise GeometryError(f"box must have positive area, got {coords}")

    @classmethod
    def from_sequence(cls, values: Sequence[float]) -> "BoundingBox":
        if len(values) != 4:
            raise GeometryError(f"expected 4 box coordinates, got {len(values)}")
        return cls(*(float(v) for v in values))

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def __iter__(self) -> Iterator[float]:
        return iter(self.as_tuple())


@dataclass(frozen=True)
class ImageExtent:
    width: int
    height: int

    def __post_init__(self):
        if int(self.width) != self.width or int(self.height) != self.height:
            raise GeometryError(f"image extent must be integral, got {self.width}x{self.height}")
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"image extent must be positive, got {self.width}x{self.height}")

    @property
    def area(self) -> int:
        return self.width * self.height

    def as_box(self) -> BoundingBox:
        return BoundingBox(0.0, 0.0, float(self.width), float(self.height))


def intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes; 0.0 when they are disjoint."""
    if a == b:
        return 1.0
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two ``(N, 4)`` and ``(M, 4)`` arrays of boxes."""
    a = np.asarray(boxes_a, dtype=float).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=float).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def aspect_ratio(b: BoundingBox) -> float:
    """Shorter side over longer side, in (0, 1]."""
    return min(b.width, b.height) / max(b.width, b.height)


def clamp_box(b: BoundingBox, img: ImageExtent) -> BoundingBox:
    """Intersect ``b`` with the image rectangle."""
    x0, y0 = max(b.x_min, 0.0), max(b.y_min, 0.0)
    x1, y1 = min(b.x_max, float(img.width)), min(b.y_max, float(img.height))
    if x0 >= x1 or y0 >= y1:
        raise GeometryError(f"box {b.as_tuple()} does not overlap the {img.width}x{img.height} image")
    if (x0, y0, x1, y1) == b.as_tuple():
        return b
    return BoundingBox(x0, y0, x1, y1)


def zone_bands(anchor: BoundingBox, img: ImageExtent) -> tuple[np.ndarray, np.ndarray]:
    """Column and row band edges of the grid, each a length-4 array.

    Columns are ``[xs[i], xs[i+1]]`` for i in 0..2, rows likewise. The
    anchor is clipped to the image first so the edges are monotone.
    """
    a = clamp_box(anchor, img)
    xs = np.array([0.0, a.x_min, a.x_max, float(img.width)])
    ys = np.array([0.0, a.y_min, a.y_max, float(img.height)])
    return xs, ys


def zone_rects(anchor: BoundingBox, img: ImageExtent) -> list[tuple[float, float, float, float] | None]:
    """The nine zone rectangles; ``None`` for zones with zero area."""
    xs, ys = zone_bands(anchor, img)
    rects = []
    for row in range(3):
        for col in range(3):
            x0, x1, y0, y1 = xs[col], xs[col + 1], ys[row], ys[row + 1]
            rects.append((x0, y0, x1, y1) if x1 > x0 and y1 > y0 else None)
    return rects


def _band_overlap(edges: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return np.clip(np.minimum(edges[1:], hi) - np.maximum(edges[:-1], lo), 0.0, None)


def zone_overlap(anchor: BoundingBox, secondary: BoundingBox, img: ImageExtent) -> np.ndarray:
    """Fraction of the secondary box's in-image area lying in each zone.

    Returns a length-9 array summing to 1. The secondary is clipped to the
    image before measuring; a secondary entirely outside the image raises
    :class:`GeometryError`.
    """
    sec = clamp_box(secondary, img)
    xs, ys = zone_bands(anchor, img)
    ox = _band_overlap(xs, sec.x_min, sec.x_max)
    oy = _band_overlap(ys, sec.y_min, sec.y_max)
    # Band overlaps partition the clipped extent, so normalise per axis.
    fractions = np.outer(oy / oy.sum(), ox / ox.sum()).ravel()
    return fractions


def mirror_zones(fractions: Sequence[float]) -> np.ndarray:
    """Reflect a zone vector left/right (swap Z0/Z2, Z3/Z5, Z6/Z8)."""
    return np.asarray(fractions, dtype=float)[list(MIRROR_PERMUTATION)]
