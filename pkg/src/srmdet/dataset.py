"""Annotated scenes: VOC XML and JSONL I/O, difficult filtering, synthesis.

JSONL scene format (one UTF-8 JSON object per line)::

    {"scene_id": "000005", "width": 500, "height": 375,
     "objects": [{"class": "chair", "box": [263.0, 211.0, 324.0, 339.0],
                  "difficult": false}]}
"""

from __future__ import annotations

import io
import json
import logging
import math
import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np

from .geometry import BoundingBox, GeometryError, ImageExtent, NUM_ZONES, clamp_box, zone_bands

logger = logging.getLogger(__name__)

FORMATS = ("jsonl", "voc-dir")
MAX_PLACEMENT_RETRIES = 50


class AnnotationError(ValueError):
    """Raised when an annotation document cannot be turned into a Scene."""


@dataclass(frozen=True)
class GroundTruthObject:
    class_label: str
    box: BoundingBox
    difficult: bool = False

    def __post_init__(self):
        if not self.class_label:
            raise AnnotationError("object class label must be non-empty")


@dataclass(frozen=True)
class Scene:
    scene_id: str
    extent: ImageExtent
    objects: tuple[GroundTruthObject, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        for obj in self.objects:
            try:
                clamp_box(obj.box, self.extent)
            except GeometryError as exc:
                raise AnnotationError(f"scene {self.scene_id!r}: {exc}") from None

    @property
    def class_labels(self) -> set[str]:
        return {o.class_label for o in self.objects}


def class_vocabulary(scenes: Iterable[Scene]) -> list[str]:
    """Sorted set of class labels appearing in ``scenes``."""
    return sorted({o.class_label for s in scenes for o in s.objects})


# ---------------------------------------------------------------------------
# VOC XML
# ---------------------------------------------------------------------------

def _child_text(elem: ET.Element, tag: str, where: str) -> str:
    child = elem.find(tag)
    if child is None or child.text is None or not child.text.strip():
        raise AnnotationError(f"missing <{tag}> in {where}")
    return child.text.strip()


def _child_number(elem: ET.Element, tag: str, where: str) -> float:
    text = _child_text(elem, tag, where)
    try:
        return float(text)
    except ValueError:
        raise AnnotationError(f"<{tag}> in {where} is not a number: {text!r}") from None


def parse_voc_xml(document: bytes | str | IO, scene_id: str | None = None) -> Scene:
    """Parse one PASCAL VOC annotation document.

    ``scene_id`` defaults to the stem of the ``<filename>`` element.
    Integer pixel coordinates are carried over as floats unchanged.
    """
    if isinstance(document, str):
        document = document.encode("utf-8")
    if isinstance(document, bytes):
        document = io.BytesIO(document)
    try:
        root = ET.parse(document).getroot()
    except ET.ParseError as exc:
        raise AnnotationError(f"malformed annotation XML: {exc}") from None

    size = root.find("size")
    if size is None:
        raise AnnotationError("missing <size> element")
    width = _child_number(size, "width", "<size>")
    height = _child_number(size, "height", "<size>")
    try:
        extent = ImageExtent(int(width), int(height))
    except GeometryError as exc:
        raise AnnotationError(f"invalid <size>: {exc}") from None

    if scene_id is None:
        fname = root.findtext("filename")
        scene_id = Path(fname.strip()).stem if fname and fname.strip() else ""
    if not scene_id:
        raise AnnotationError("missing <filename> and no scene_id given")

    objects = []
    for i, obj in enumerate(root.findall("object")):
        where = f"<object> #{i}"
        name = _child_text(obj, "name", where)
        bnd = obj.find("bndbox")
        if bnd is None:
            raise AnnotationError(f"missing <bndbox> in {where} ({name})")
        coords = [_child_number(bnd, t, f"<bndbox> of {where}") for t in ("xmin", "ymin", "xmax", "ymax")]
        try:
            box = BoundingBox(*coords)
        except GeometryError as exc:
            raise AnnotationError(f"<bndbox> of {where} ({name}): {exc}") from None
        difficult_text = obj.findtext("difficult")
        difficult = bool(int(float(difficult_text))) if difficult_text and difficult_text.strip() else False
        objects.append(GroundTruthObject(name, box, difficult))
    return Scene(scene_id, extent, tuple(objects))


def _fmt_coord(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def scene_to_voc_xml(scene: Scene) -> bytes:
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = f"{scene.scene_id}.jpg"
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(scene.extent.width)
    ET.SubElement(size, "height").text = str(scene.extent.height)
    ET.SubElement(size, "depth").text = "3"
    for obj in scene.objects:
        o = ET.SubElement(root, "object")
        ET.SubElement(o, "name").text = obj.class_label
        ET.SubElement(o, "difficult").text = "1" if obj.difficult else "0"
        bnd = ET.SubElement(o, "bndbox")
        for tag, v in zip(("xmin", "ymin", "xmax", "ymax"), obj.box):
            ET.SubElement(bnd, tag).text = _fmt_coord(v)
    return ET.tostring(root, encoding="utf-8")


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------

def scene_to_record(scene: Scene) -> dict:
    return {
        "scene_id": scene.scene_id,
        "width": scene.extent.width,
        "height": scene.extent.height,
        "objects": [
            {"class": o.class_label, "box": [float(v) for v in o.box], "difficult": o.difficult}
            for o in scene.objects
        ],
    }


def scene_from_record(record: dict) -> Scene:
    try:
        objects = tuple(
            GroundTruthObject(o["class"], BoundingBox.from_sequence(o["box"]), bool(o.get("difficult", False)))
            for o in record["objects"]
        )
        return Scene(str(record["scene_id"]), ImageExtent(record["width"], record["height"]), objects)
    except KeyError as exc:
        raise AnnotationError(f"scene record missing field {exc}") from None
    except GeometryError as exc:
        raise AnnotationError(f"scene {record.get('scene_id')!r}: {exc}") from None


def _read_jsonl(stream: IO[str], source: str) -> list[Scene]:
    scenes = []
    for lineno, line in enumerate(stream, 1):
        if not line.strip():
            continue
        try:
            scenes.append(scene_from_record(json.loads(line)))
        except (json.JSONDecodeError, AnnotationError) as exc:
            raise AnnotationError(f"{source}:{lineno}: {exc}") from None
    return scenes


def read_scenes(path: str | os.PathLike | IO[str], format: str = "jsonl") -> list[Scene]:
    if format not in FORMATS:
        raise ValueError(f"unknown scene format {format!r}; expected one of {FORMATS}")
    if format == "jsonl":
        if hasattr(path, "read"):
            return _read_jsonl(path, getattr(path, "name", "<stream>"))
        with open(path, encoding="utf-8") as f:
            return _read_jsonl(f, str(path))
    directory = Path(path)
    if not directory.is_dir():
        raise FileNotFoundError(f"annotation directory not found: {directory}")
    scenes = []
    for xml_path in sorted(directory.glob("*.xml")):
        try:
            scenes.append(parse_voc_xml(xml_path.read_bytes(), scene_id=xml_path.stem))
        except AnnotationError as exc:
            raise AnnotationError(f"{xml_path}: {exc}") from None
    return scenes


def write_scenes(scenes: Sequence[Scene], path: str | os.PathLike | IO[str], format: str = "jsonl") -> None:
    if format not in FORMATS:
        raise ValueError(f"unknown scene format {format!r}; expected one of {FORMATS}")
    if format == "jsonl":
        lines = "".join(json.dumps(scene_to_record(s)) + "\n" for s in scenes)
        if hasattr(path, "write"):
            path.write(lines)
        else:
            Path(path).write_text(lines, encoding="utf-8")
        return
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    for s in scenes:
        (directory / f"{s.scene_id}.xml").write_bytes(scene_to_voc_xml(s))


def filter_difficult(scene: Scene, include: bool) -> Scene:
    if include:
        return scene
    return replace(scene, objects=tuple(o for o in scene.objects if not o.difficult))


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlacementRule:
    """How a partner of class b is placed around an anchor of class a.

    ``rel_size_mean``/``rel_size_std`` describe area(anchor)/area(partner);
    the ratio is drawn log-normally with that median and log-std.
    """

    zones: tuple[float, ...]
    rel_size_mean: float = 4.0
    rel_size_std: float = 0.0

    def __post_init__(self):
        z = np.asarray(self.zones, dtype=float)
        if z.shape != (NUM_ZONES,) or np.any(z < 0) or abs(z.sum() - 1.0) > 1e-9:
            raise ValueError(f"zone distribution must be 9 non-negative values summing to 1, got {self.zones}")
        if self.rel_size_mean <= 0 or self.rel_size_std < 0:
            raise ValueError("relative size mean must be positive and std non-negative")


@dataclass
class SceneProfile:
    """Parameters of the synthetic scene generator.

    A scene is a union of groups. Each group has one anchor drawn from
    ``class_prior``; every other class b joins the group with probability
    ``cooccurrence[a][b]`` (``partner_instances`` copies, uniform in the
    range) and is placed by ``placement[(a, b)]`` when a rule exists, else
    uniformly in the image. The number of groups is ``1 + Poisson(lam)``
    with ``lam`` chosen so the expected object count equals
    ``clutter_level`` (never below one group).
    """

    class_names: list[str]
    class_prior: list[float]
    cooccurrence: list[list[float]]
    placement: dict[tuple[str, str], PlacementRule] = field(default_factory=dict)
    aspect: dict[str, tuple[float, float]] = field(default_factory=dict)
    anchor_size: dict[str, tuple[float, float]] = field(default_factory=dict)
    clutter_level: float = 1.0
    occlusion_rate: float = 0.0
    partner_instances: tuple[int, int] = (1, 1)
    min_objects: int = 0
    max_objects: int = 42
    width: int = 256
    height: int = 256
    seed: int = 0

    def __post_init__(self):
        n = len(self.class_names)
        prior = np.asarray(self.class_prior, dtype=float)
        co = np.asarray(self.cooccurrence, dtype=float)
        if prior.shape != (n,) or np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-9:
            raise ValueError("class_prior must be a probability vector over class_names")
        if co.shape != (n, n) or np.any(co < 0) or np.any(co > 1):
            raise ValueError("cooccurrence must be an n x n table of probabilities")
        for (a, b) in self.placement:
            if a not in self.class_names or b not in self.class_names:
                raise ValueError(f"placement rule for unknown pair {(a, b)}")
        for name, (_, std) in {**self.aspect, **self.anchor_size}.items():
            if std < 0:
                raise ValueError(f"negative std for {name}")
        if not 0 <= self.occlusion_rate <= 1:
            raise ValueError("occlusion_rate must be in [0, 1]")
        lo, hi = self.partner_instances
        if not 1 <= lo <= hi:
            raise ValueError("partner_instances must satisfy 1 <= min <= max")
        if self.min_objects > self.max_objects:
            raise ValueError("min_objects exceeds max_objects")

    @property
    def expected_group_size(self) -> float:
        co = np.asarray(self.cooccurrence, dtype=float)
        np.fill_diagonal(co, 0.0)
        mean_inst = 0.5 * sum(self.partner_instances)
        return float(1.0 + np.asarray(self.class_prior) @ co.sum(axis=1) * mean_inst)

    @property
    def group_rate(self) -> float:
        """Poisson rate of additional groups beyond the first."""
        return max(self.clutter_level / self.expected_group_size - 1.0, 0.0)

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "class_prior": list(self.class_prior),
            "cooccurrence": [list(r) for r in self.cooccurrence],
            "placement": [
                {"anchor": a, "partner": b, "zones": list(r.zones),
                 "rel_size_mean": r.rel_size_mean, "rel_size_std": r.rel_size_std}
                for (a, b), r in self.placement.items()
            ],
            "aspect": {k: list(v) for k, v in self.aspect.items()},
            "anchor_size": {k: list(v) for k, v in self.anchor_size.items()},
            "clutter_level": self.clutter_level,
            "occlusion_rate": self.occlusion_rate,
            "partner_instances": list(self.partner_instances),
            "min_objects": self.min_objects,
            "max_objects": self.max_objects,
            "width": self.width,
            "height": self.height,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneProfile":
        d = dict(d)
        placement = {
            (p["anchor"], p["partner"]): PlacementRule(
                tuple(p["zones"]), p.get("rel_size_mean", 4.0), p.get("rel_size_std", 0.0))
            for p in d.pop("placement", [])
        }
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown profile keys: {sorted(unknown)}")
        d["aspect"] = {k: tuple(v) for k, v in d.get("aspect", {}).items()}
        d["anchor_size"] = {k: tuple(v) for k, v in d.get("anchor_size", {}).items()}
        if "partner_instances" in d:
            d["partner_instances"] = tuple(d["partner_instances"])
        return cls(placement=placement, **d)


class GeneratedScenes(list):
    """List of generated scenes carrying generation metadata.

    ``skipped`` counts objects dropped because no in-bounds placement was
    found within the retry budget.
    """

    skipped: int = 0


def _box_dims(rng: np.random.Generator, area: float, aspect_mean: float, aspect_std: float) -> tuple[float, float]:
    ar = aspect_mean + aspect_std * rng.standard_normal() if aspect_std > 0 else aspect_mean
    ar = float(np.clip(ar, 0.05, 1.0))
    long_side = math.sqrt(area / ar)
    short_side = long_side * ar
    # Orientation is a coin flip; aspect ratio is orientation-free.
    return (short_side, long_side) if rng.random() < 0.5 else (long_side, short_side)


def _place_in_rect(rng, w, h, rect) -> tuple[float, float] | None:
    x0, y0, x1, y1 = rect
    if x1 - x0 < w or y1 - y0 < h:
        return None
    return (x0 + rng.random() * (x1 - x0 - w), y0 + rng.random() * (y1 - y0 - h))


def _occlude(rng, box: BoundingBox) -> BoundingBox:
    """Crop 40-80% of the box area away from one randomly chosen side."""
    keep = 1.0 - rng.uniform(0.4, 0.8)
    side = rng.integers(4)
    x0, y0, x1, y1 = box.as_tuple()
    if side == 0:
        x1 = x0 + (x1 - x0) * keep
    elif side == 1:
        x0 = x1 - (x1 - x0) * keep
    elif side == 2:
        y1 = y0 + (y1 - y0) * keep
    else:
        y0 = y1 - (y1 - y0) * keep
    return BoundingBox(x0, y0, x1, y1)


def _generate_group(rng, profile: SceneProfile, img: ImageExtent, index: dict[str, int]):
    names = profile.class_names
    co = profile.cooccurrence
    anchor = names[rng.choice(len(names), p=profile.class_prior)]
    a = index[anchor]
    partners = []
    for b, name in enumerate(names):
        if b == a or co[a][b] <= 0 or rng.random() >= co[a][b]:
            continue
        lo, hi = profile.partner_instances
        partners.extend([name] * int(rng.integers(lo, hi + 1)))

    area_frac, area_logstd = profile.anchor_size.get(anchor, (0.05, 0.0))
    anchor_area = area_frac * img.area * (math.exp(area_logstd * rng.standard_normal()) if area_logstd else 1.0)
    aw, ah = _box_dims(rng, anchor_area, *profile.aspect.get(anchor, (0.7, 0.0)))
    aw, ah = min(aw, img.width * 0.99), min(ah, img.height * 0.99)

    # Zone and size choices are fixed before positions are sampled so that
    # retries do not bias zone frequencies.
    plans = []
    for name in partners:
        rule = profile.placement.get((anchor, name))
        ratio_med = rule.rel_size_mean if rule else 1.0
        ratio_std = rule.rel_size_std if rule else 0.0
        ratio = ratio_med * (math.exp(ratio_std * rng.standard_normal()) if ratio_std else 1.0)
        pw, ph = _box_dims(rng, aw * ah / ratio, *profile.aspect.get(name, (0.7, 0.0)))
        zone = int(rng.choice(NUM_ZONES, p=rule.zones)) if rule else None
        plans.append((name, pw, ph, zone))

    full = (0.0, 0.0, float(img.width), float(img.height))
    best: tuple[list, int] | None = None
    for _ in range(MAX_PLACEMENT_RETRIES):
        pos = _place_in_rect(rng, aw, ah, full)
        if pos is None:
            return [], 1 + len(plans)
        anchor_box = BoundingBox(pos[0], pos[1], pos[0] + aw, pos[1] + ah)
        xs, ys = zone_bands(anchor_box, img)
        placed = [(anchor, anchor_box)]
        failed = 0
        for name, pw, ph, zone in plans:
            if zone is None:
                rect = full
            else:
                r, c = divmod(zone, 3)
                rect = (xs[c], ys[r], xs[c + 1], ys[r + 1])
            p = _place_in_rect(rng, pw, ph, rect)
            if p is None:
                failed += 1
                continue
            placed.append((name, BoundingBox(p[0], p[1], p[0] + pw, p[1] + ph)))
        if best is None or failed < best[1]:
            best = (placed, failed)
        if failed == 0:
            break
    return best


def _generate_scene(rng, profile: SceneProfile, img: ImageExtent, scene_id: str, index) -> tuple[Scene, int]:
    skipped = 0
    for _ in range(MAX_PLACEMENT_RETRIES):
        n_groups = 1 + int(rng.poisson(profile.group_rate))
        placed: list[tuple[str, BoundingBox]] = []
        attempt_skipped = 0
        for _ in range(n_groups):
            objs, failed = _generate_group(rng, profile, img, index)
            placed.extend(objs)
            attempt_skipped += failed
        if profile.min_objects <= len(placed) <= profile.max_objects:
            skipped += attempt_skipped
            break
    else:
        skipped += attempt_skipped
        placed = placed[: profile.max_objects]

    objects = []
    for name, box in placed:
        difficult = profile.occlusion_rate > 0 and rng.random() < profile.occlusion_rate
        if difficult:
            box = _occlude(rng, box)
        objects.append(GroundTruthObject(name, box, difficult))
    return Scene(scene_id, img, tuple(objects)), skipped


def generate_scenes(profile: SceneProfile, count: int, id_prefix: str = "syn") -> GeneratedScenes:
    """Draw ``count`` scenes from ``profile``; deterministic in ``profile.seed``.

    Scenes whose object count falls outside ``[min_objects, max_objects]``
    are redrawn (bounded retries, then truncated).
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    rng = np.random.default_rng(profile.seed)
    img = ImageExtent(profile.width, profile.height)
    index = {name: i for i, name in enumerate(profile.class_names)}
    out = GeneratedScenes()
    width = max(6, len(str(count)))
    for i in range(count):
        scene, skipped = _generate_scene(rng, profile, img, f"{id_prefix}{i:0{width}d}", index)
        out.append(scene)
        out.skipped += skipped
    if out.skipped:
        logger.warning("generate_scenes: %d objects skipped (no in-bounds placement)", out.skipped)
    return out


def load_profile(path: str | os.PathLike) -> SceneProfile:
    with open(path, encoding="utf-8") as f:
        return SceneProfile.from_dict(json.load(f))


def save_profile(profile: SceneProfile, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(profile.to_dict(), indent=2) + "\n", encoding="utf-8")
