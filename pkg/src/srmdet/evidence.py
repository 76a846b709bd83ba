"""Turning SRM statistics into region-confidence and threshold adjustments.

Three evidence sources shift a candidate's region score ``R_p`` and the
threshold ``T_p`` it must clear:

* aspect ratio against the class mean (both move by 0.02),
* relative size against each confirmed anchor (``R_p`` +0.02, ``T_p`` -0.01),
* correlation with confirmed anchors, folded into a per-class threshold map
  (threshold only).

No candidate is ever accepted below ``signal_floor``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import BoundingBox, ImageExtent, aspect_ratio, zone_bands
from .srm import SpatialRelationModel, mirror_lr

ASPECT = "ASPECT"
SIZE = "SIZE"
CORRELATION = "CORRELATION"


@dataclass(frozen=True)
class DetectionPolicy:
    base_tp: float = 0.5
    signal_floor: float = 0.36
    max_cumulative_delta: float = 0.10
    clamp_low: float = 0.001
    clamp_high: float = 0.999
    aspect_delta_rp: float = 0.02
    aspect_delta_tp: float = 0.02
    size_delta_rp: float = 0.02
    size_delta_tp: float = 0.01
    # |z| above this counts as aspect evidence against; 3.0 is the alternative cut.
    aspect_against_z: float = 2.0
    size_mode: str = "log"
    map_stride: int = 4
    mirror_spatial: bool = True

    def __post_init__(self):
        if not 0 < self.signal_floor < 1:
            raise ValueError("signal_floor must be in (0, 1)")
        if not 0 < self.base_tp < 1:
            raise ValueError("base_tp must be in (0, 1)")
        if not 0 < self.clamp_low < self.clamp_high < 1:
            raise ValueError("clamp bounds must satisfy 0 < low < high < 1")
        if self.max_cumulative_delta < 0:
            raise ValueError("max_cumulative_delta must be non-negative")
        if self.aspect_against_z < 1:
            raise ValueError("aspect_against_z must be >= 1")
        if self.size_mode not in ("log", "raw"):
            raise ValueError("size_mode must be 'log' or 'raw'")
        if self.map_stride < 1:
            raise ValueError("map_stride must be >= 1")

    def clamp(self, v: float) -> float:
        return min(max(v, self.clamp_low), self.clamp_high)


DEFAULT_POLICY = DetectionPolicy()


@dataclass(frozen=True)
class EvidenceAdjustment:
    delta_rp: float = 0.0
    delta_tp: float = 0.0
    source: str = ASPECT
    anchor: int | None = None


def aspect_z(box: BoundingBox, label: str, srm: SpatialRelationModel) -> float | None:
    mean, std = srm.aspect(label)
    if std <= 0 or srm.instance_count[srm.index(label)] == 0:
        return None
    return (aspect_ratio(box) - mean) / std


def aspect_evidence(box: BoundingBox, label: str, srm: SpatialRelationModel,
                    policy: DetectionPolicy = DEFAULT_POLICY) -> EvidenceAdjustment:
    z = aspect_z(box, label, srm)
    return aspect_adjustment_for_z(z, policy)


def aspect_adjustment_for_z(z: float | None, policy: DetectionPolicy = DEFAULT_POLICY) -> EvidenceAdjustment:
    if z is None:
        return EvidenceAdjustment(0.0, 0.0, ASPECT)
    if abs(z) <= 1.0:
        return EvidenceAdjustment(policy.aspect_delta_rp, -policy.aspect_delta_tp, ASPECT)
    if abs(z) <= policy.aspect_against_z:
        return EvidenceAdjustment(0.0, 0.0, ASPECT)
    return EvidenceAdjustment(-policy.aspect_delta_rp, policy.aspect_delta_tp, ASPECT)


def size_z(box: BoundingBox, label: str, anchor_label: str, anchor_box: BoundingBox,
           srm: SpatialRelationModel, policy: DetectionPolicy = DEFAULT_POLICY) -> float | None:
    if not srm.seen_pair(label, anchor_label):
        return None
    ratio = box.area / anchor_box.area
    if policy.size_mode == "log":
        mean, std = srm.rel_size(label, anchor_label, log=True)
        value = math.log(ratio)
    else:
        mean, std = srm.rel_size(label, anchor_label)
        value = ratio
    if std <= 0:
        return None
    return (value - mean) / std


def size_evidence(box: BoundingBox, label: str, confirmed: Sequence, srm: SpatialRelationModel,
                  policy: DetectionPolicy = DEFAULT_POLICY) -> EvidenceAdjustment:
    """Summed relative-size evidence over all confirmed anchors, clipped."""
    srm.index(label)
    d_rp = d_tp = 0.0
    for anchor in confirmed:
        z = size_z(box, label, anchor.class_label, anchor.box, srm, policy)
        if z is not None and abs(z) <= 1.0:
            d_rp += policy.size_delta_rp
            d_tp -= policy.size_delta_tp
    cap = policy.max_cumulative_delta
    return EvidenceAdjustment(min(d_rp, cap), max(d_tp, -cap), SIZE)


# ---------------------------------------------------------------------------
# Correlation threshold map
# ---------------------------------------------------------------------------

def _axis_overlap(length: int, stride: int, edges: np.ndarray) -> np.ndarray:
    """``(cells, len(edges)-1)`` overlap lengths between grid cells and bands."""
    starts = np.arange(0, length, stride, dtype=float)
    ends = np.minimum(starts + stride, float(length))
    lo, hi = edges[:-1], edges[1:]
    return np.clip(np.minimum(ends[:, None], hi[None, :]) - np.maximum(starts[:, None], lo[None, :]), 0.0, None)


def _cell_sizes(length: int, stride: int) -> np.ndarray:
    starts = np.arange(0, length, stride, dtype=float)
    return np.minimum(starts + stride, float(length)) - starts


@dataclass
class ThresholdMap:
    """Per-class threshold modifiers on a grid of ``stride``-pixel cells.

    ``modifiers[c, i, j]`` is subtracted from ``base_tp`` for class ``c``
    in the cell at row ``i``, column ``j``.
    """

    extent: ImageExtent
    classes: list[str]
    stride: int
    base_tp: float
    modifiers: np.ndarray
    policy: DetectionPolicy = field(default=DEFAULT_POLICY, repr=False)

    def class_index(self, label: str) -> int:
        return self.classes.index(label)


def correlation_contribution(anchor_label: str, anchor_box: BoundingBox, img: ImageExtent,
                             srm: SpatialRelationModel, policy: DetectionPolicy = DEFAULT_POLICY) -> np.ndarray:
    """One anchor's modifier grids for every class, shape ``(n, rows, cols)``.

    Each cell receives, per zone, ``spatial(A, B)[zone] * P(B | A)`` weighted
    by the fraction of the cell lying in that zone. Unseen pairs add nothing.
    """
    s = policy.map_stride
    xs, ys = zone_bands(anchor_box, img)
    fx = _axis_overlap(img.width, s, xs) / _cell_sizes(img.width, s)[:, None]
    fy = _axis_overlap(img.height, s, ys) / _cell_sizes(img.height, s)[:, None]
    out = np.zeros((srm.n, len(fy), len(fx)))
    a = srm.index(anchor_label)
    for b in range(srm.n):
        if srm.pair_count[a, b] <= 0:
            continue
        zones = srm.spatial[a, b]
        if policy.mirror_spatial:
            zones = mirror_lr(zones)
        weight = zones.reshape(3, 3) * srm.cond_prob[b, a]
        if not weight.any():
            continue
        out[b] = fy @ weight @ fx.T
    return out


def build_threshold_map(img: ImageExtent, confirmed: Sequence, srm: SpatialRelationModel,
                        policy: DetectionPolicy = DEFAULT_POLICY) -> ThresholdMap:
    """Accumulate correlation modifiers from every confirmed detection.

    Contributions from all anchors add up and the total is held at
    ``max_cumulative_delta`` per cell and class.
    """
    s = policy.map_stride
    rows, cols = math.ceil(img.height / s), math.ceil(img.width / s)
    total = np.zeros((srm.n, rows, cols))
    for det in confirmed:
        total += correlation_contribution(det.class_label, det.box, img, srm, policy)
    modifiers = np.minimum(total, policy.max_cumulative_delta)
    return ThresholdMap(img, list(srm.classes), s, policy.base_tp, modifiers, policy)


def region_modifiers(tmap: ThresholdMap, regions: np.ndarray) -> np.ndarray:
    """Area-weighted mean modifier of each region for each class, ``(R, n)``."""
    regions = np.asarray(regions, dtype=float).reshape(-1, 4)
    s = tmap.stride
    W, H = tmap.extent.width, tmap.extent.height
    col_starts = np.arange(0, W, s, dtype=float)
    row_starts = np.arange(0, H, s, dtype=float)
    rx = np.clip(np.minimum(col_starts[None, :] + s, np.minimum(regions[:, 2:3], W))
                 - np.maximum(col_starts[None, :], regions[:, 0:1]), 0, None)
    ry = np.clip(np.minimum(row_starts[None, :] + s, np.minimum(regions[:, 3:4], H))
                 - np.maximum(row_starts[None, :], regions[:, 1:2]), 0, None)
    area = rx.sum(1) * ry.sum(1)
    area = np.where(area > 0, area, 1.0)
    out = np.empty((len(regions), len(tmap.classes)))
    for c in range(len(tmap.classes)):
        m = tmap.modifiers[c]
        out[:, c] = ((ry @ m) * rx).sum(axis=1) if m.any() else 0.0
    return out / area[:, None]


def region_threshold(tmap: ThresholdMap, region: BoundingBox, label: str) -> float:
    """Threshold for ``label`` in ``region``: base minus the mean modifier."""
    c = tmap.class_index(label)
    mod = region_modifiers(tmap, np.array([region.as_tuple()]))[0, c]
    return tmap.policy.clamp(tmap.base_tp - mod)


@dataclass(frozen=True)
class Decision:
    accept: bool
    region_score: float
    threshold: float


def decide(raw_score: float, aspect_adj: EvidenceAdjustment | None, size_adj: EvidenceAdjustment | None,
           threshold: float, policy: DetectionPolicy = DEFAULT_POLICY) -> Decision:
    """Apply evidence to a candidate and test it against its threshold."""
    if not 0.0 <= raw_score <= 1.0:
        raise ValueError(f"raw score must lie in [0, 1], got {raw_score}")
    adjs = [a for a in (aspect_adj, size_adj) if a is not None]
    rp = policy.clamp(raw_score + sum(a.delta_rp for a in adjs))
    tp = policy.clamp(threshold + sum(a.delta_tp for a in adjs))
    return Decision(raw_score >= policy.signal_floor and rp >= tp, rp, tp)
