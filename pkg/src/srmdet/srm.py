"""Spatial relation model: co-occurrence and layout statistics over class pairs.

Table conventions (``n`` classes, lexicographic order):

* ``cond_prob[a, b]`` is P(image contains a | image contains b).
* ``spatial[a, b]`` is the zone distribution of class b instances relative
  to class a anchors (shape ``(n, n, 9)``).
* ``rel_size_*[a, b]`` describe area(a) / area(b) over instance pairs.
* ``pair_count[a, b]`` counts ordered pairs of distinct instances
  (one of a, one of b) sharing an image.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import Scene, class_vocabulary, filter_difficult
from .geometry import NUM_ZONES, aspect_ratio, mirror_zones, zone_overlap

SCHEMA_NAME = "srmdet.srm"
SCHEMA_VERSION = 1

UNIFORM_ZONES = np.full(NUM_ZONES, 1.0 / NUM_ZONES)


class ModelError(ValueError):
    """Raised for malformed model files or an untrainable corpus."""


class UnknownClassError(KeyError):
    def __str__(self):
        return f"unknown class label {self.args[0]!r}"


@dataclass
class SpatialRelationModel:
    classes: list[str]
    class_fraction: np.ndarray
    image_fraction: np.ndarray
    cond_prob: np.ndarray
    spatial: np.ndarray
    rel_size_mean: np.ndarray
    rel_size_std: np.ndarray
    rel_size_log_mean: np.ndarray
    rel_size_log_std: np.ndarray
    aspect_mean: np.ndarray
    aspect_std: np.ndarray
    pair_count: np.ndarray
    instance_count: np.ndarray
    image_count: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self._index = {c: i for i, c in enumerate(self.classes)}

    @property
    def n(self) -> int:
        return len(self.classes)

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise UnknownClassError(label) from None

    def __contains__(self, label: str) -> bool:
        return label in self._index

    # Query surface -------------------------------------------------------

    def get_class_fraction(self, c: str) -> float:
        return float(self.class_fraction[self.index(c)])

    def get_image_fraction(self, c: str) -> float:
        return float(self.image_fraction[self.index(c)])

    def get_cond_prob(self, a: str, b: str) -> float:
        """P(image contains a | image contains b)."""
        return float(self.cond_prob[self.index(a), self.index(b)])

    def spatial_dist(self, a: str, b: str, mirrored: bool = False) -> np.ndarray:
        d = self.spatial[self.index(a), self.index(b)].copy()
        return mirror_lr(d) if mirrored else d

    def rel_size(self, a: str, b: str, log: bool = False) -> tuple[float, float]:
        i, j = self.index(a), self.index(b)
        if log:
            return float(self.rel_size_log_mean[i, j]), float(self.rel_size_log_std[i, j])
        return float(self.rel_size_mean[i, j]), float(self.rel_size_std[i, j])

    def aspect(self, c: str) -> tuple[float, float]:
        i = self.index(c)
        return float(self.aspect_mean[i]), float(self.aspect_std[i])

    def co_occurrence(self, a: str, b: str) -> int:
        return int(self.pair_count[self.index(a), self.index(b)])

    def seen_pair(self, a: str, b: str) -> bool:
        return self.co_occurrence(a, b) > 0

    def __eq__(self, other):
        if not isinstance(other, SpatialRelationModel):
            return NotImplemented
        return _to_record(self) == _to_record(other)


def mirror_lr(d: Sequence[float]) -> np.ndarray:
    """Average each left/right zone pair; Z1, Z4, Z7 are untouched."""
    d = np.asarray(d, dtype=float)
    return 0.5 * (d + mirror_zones(d))


def train_srm(scenes: Iterable[Scene], include_difficult: bool = False,
              classes: Sequence[str] | None = None) -> SpatialRelationModel:
    """Fit all statistic tables in a single pass over ``scenes``.

    The class vocabulary is taken from every object (difficult or not) so
    it stays stable when the difficult flag is toggled; statistics use only
    the objects kept by ``include_difficult``.
    """
    scenes = list(scenes)
    if not scenes or not any(s.objects for s in scenes):
        raise ModelError("cannot train on an empty corpus")
    vocab = list(classes) if classes is not None else class_vocabulary(scenes)
    idx = {c: i for i, c in enumerate(vocab)}
    n = len(vocab)

    inst = np.zeros(n)
    img_has = np.zeros(n)
    joint = np.zeros((n, n))
    pairs = np.zeros((n, n))
    zone_sum = np.zeros((n, n, NUM_ZONES))
    size_sum = np.zeros((n, n))
    size_sq = np.zeros((n, n))
    log_sum = np.zeros((n, n))
    log_sq = np.zeros((n, n))
    asp_sum = np.zeros(n)
    asp_sq = np.zeros(n)

    for scene in scenes:
        objs = filter_difficult(scene, include_difficult).objects
        labels = [idx[o.class_label] for o in objs]
        present = np.zeros(n, dtype=bool)
        present[labels] = True
        img_has += present
        joint += np.outer(present, present)
        for o, li in zip(objs, labels):
            inst[li] += 1
            ar = aspect_ratio(o.box)
            asp_sum[li] += ar
            asp_sq[li] += ar * ar
        for i, (oa, la) in enumerate(zip(objs, labels)):
            for j, (ob, lb) in enumerate(zip(objs, labels)):
                if i == j:
                    continue
                pairs[la, lb] += 1
                zone_sum[la, lb] += zone_overlap(oa.box, ob.box, scene.extent)
                r = oa.box.area / ob.box.area
                lr = math.log(r)
                size_sum[la, lb] += r
                size_sq[la, lb] += r * r
                log_sum[la, lb] += lr
                log_sq[la, lb] += lr * lr

    total = inst.sum()
    if total == 0:
        raise ModelError("cannot train: no objects left after difficult filtering")
    n_images = len(scenes)

    with np.errstate(invalid="ignore", divide="ignore"):
        cond = np.where(img_has[None, :] > 0, joint / img_has[None, :], 0.0)
        seen = pairs > 0
        spatial = np.where(seen[..., None], zone_sum / np.where(seen, pairs, 1.0)[..., None], UNIFORM_ZONES)
        cnt = np.where(seen, pairs, 1.0)
        rs_mean = np.where(seen, size_sum / cnt, 1.0)
        rs_std = np.where(seen, np.sqrt(np.clip(size_sq / cnt - rs_mean ** 2, 0, None)), 0.0)
        lg_mean = np.where(seen, log_sum / cnt, 0.0)
        lg_std = np.where(seen, np.sqrt(np.clip(log_sq / cnt - lg_mean ** 2, 0, None)), 0.0)
        icnt = np.where(inst > 0, inst, 1.0)
        a_mean = np.where(inst > 0, asp_sum / icnt, 1.0)
        a_std = np.where(inst > 1, np.sqrt(np.clip(asp_sq / icnt - a_mean ** 2, 0, None)), 0.0)
    # Renormalise so each seen row sums to 1 to machine precision.
    spatial[seen] /= spatial[seen].sum(axis=-1, keepdims=True)

    metadata = {
        "include_difficult": include_difficult,
        "single_instance_classes": [vocab[i] for i in range(n) if inst[i] == 1],
        "unseen_classes": [vocab[i] for i in range(n) if inst[i] == 0],
        "unseen_pairs": int((~seen).sum()),
    }
    return SpatialRelationModel(
        classes=vocab,
        class_fraction=inst / total,
        image_fraction=img_has / n_images,
        cond_prob=cond,
        spatial=spatial,
        rel_size_mean=rs_mean,
        rel_size_std=rs_std,
        rel_size_log_mean=lg_mean,
        rel_size_log_std=lg_std,
        aspect_mean=a_mean,
        aspect_std=a_std,
        pair_count=pairs.astype(np.int64),
        instance_count=inst.astype(np.int64),
        image_count=n_images,
        metadata=metadata,
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_TABLES = (
    "class_fraction", "image_fraction", "cond_prob", "spatial",
    "rel_size_mean", "rel_size_std", "rel_size_log_mean", "rel_size_log_std",
    "aspect_mean", "aspect_std", "pair_count", "instance_count",
)
_INT_TABLES = {"pair_count", "instance_count"}


def _to_record(model: SpatialRelationModel) -> dict:
    return {
        "schema": SCHEMA_NAME,
        "version": SCHEMA_VERSION,
        "classes": list(model.classes),
        "image_count": int(model.image_count),
        "tables": {name: getattr(model, name).tolist() for name in _TABLES},
        "metadata": model.metadata,
    }


def dumps_srm(model: SpatialRelationModel) -> str:
    # json writes floats with repr(), which round-trips exactly.
    return json.dumps(_to_record(model), indent=1, sort_keys=True) + "\n"


def loads_srm(text: str) -> SpatialRelationModel:
    try:
        rec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"corrupt model file: {exc}") from None
    if not isinstance(rec, dict) or rec.get("schema") != SCHEMA_NAME:
        raise ModelError("not a spatial relation model file")
    if rec.get("version") != SCHEMA_VERSION:
        raise ModelError(f"unsupported model schema version {rec.get('version')!r} (expected {SCHEMA_VERSION})")
    try:
        classes = list(rec["classes"])
        n = len(classes)
        tables = {}
        for name in _TABLES:
            dtype = np.int64 if name in _INT_TABLES else float
            tables[name] = np.asarray(rec["tables"][name], dtype=dtype)
        expected = {
            "class_fraction": (n,), "image_fraction": (n,), "aspect_mean": (n,), "aspect_std": (n,),
            "instance_count": (n,), "spatial": (n, n, NUM_ZONES),
        }
        for name, arr in tables.items():
            shape = expected.get(name, (n, n))
            if arr.shape != shape:
                raise ModelError(f"table {name} has shape {arr.shape}, expected {shape}")
        return SpatialRelationModel(classes=classes, image_count=int(rec["image_count"]),
                                    metadata=rec.get("metadata", {}), **tables)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelError):
            raise
        raise ModelError(f"corrupt model file: {exc!r}") from None


def save_srm(model: SpatialRelationModel, path: str | os.PathLike) -> None:
    Path(path).write_text(dumps_srm(model), encoding="utf-8")


def load_srm(path: str | os.PathLike) -> SpatialRelationModel:
    return loads_srm(Path(path).read_text(encoding="utf-8"))


def model_from_tables(classes: Sequence[str], *, pair_count=None, spatial=None, cond_prob=None,
                      aspect=None, rel_size_log=None) -> SpatialRelationModel:
    """Assemble a model from hand-specified tables (test fixtures, what-ifs).

    Unspecified tables take the unseen-pair fallbacks. ``aspect`` and
    ``rel_size_log`` map labels / label pairs to ``(mean, std)``.
    """
    classes = list(classes)
    n = len(classes)
    idx = {c: i for i, c in enumerate(classes)}
    pc = np.zeros((n, n), dtype=np.int64)
    sp = np.tile(UNIFORM_ZONES, (n, n, 1))
    cp = np.zeros((n, n))
    for (a, b), v in (pair_count or {}).items():
        pc[idx[a], idx[b]] = v
    for (a, b), v in (spatial or {}).items():
        sp[idx[a], idx[b]] = np.asarray(v, dtype=float)
    for (a, b), v in (cond_prob or {}).items():
        cp[idx[a], idx[b]] = v
    a_mean, a_std = np.ones(n), np.zeros(n)
    for c, (m, s) in (aspect or {}).items():
        a_mean[idx[c]], a_std[idx[c]] = m, s
    lg_mean, lg_std = np.zeros((n, n)), np.zeros((n, n))
    for (a, b), (m, s) in (rel_size_log or {}).items():
        lg_mean[idx[a], idx[b]], lg_std[idx[a], idx[b]] = m, s
    return SpatialRelationModel(
        classes=classes,
        class_fraction=np.full(n, 1.0 / n),
        image_fraction=np.zeros(n),
        cond_prob=cp,
        spatial=sp,
        rel_size_mean=np.exp(lg_mean),
        rel_size_std=np.zeros((n, n)),
        rel_size_log_mean=lg_mean,
        rel_size_log_std=lg_std,
        aspect_mean=a_mean,
        aspect_std=a_std,
        pair_count=pc,
        instance_count=np.ones(n, dtype=np.int64),
        image_count=0,
        metadata={"hand_built": True},
    )
