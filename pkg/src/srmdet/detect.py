"""The size-tiered, recursive detection loop and non-maximum suppression.

For each tier (LARGE, MEDIUM, SMALL) the first pass proposes windows from
image keypoints. Every later pass proposes windows from keypoints the SRM
places around everything confirmed so far, rebuilds the correlation
threshold map, and applies evidence before NMS. A tier ends when a pass
confirms nothing new, proposes nothing, or hits ``max_passes_per_tier``.
The baseline runs only the first pass of each tier and accepts on the raw
score alone.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .dataset import Scene
from .evidence import (DEFAULT_POLICY, DetectionPolicy, aspect_evidence, build_threshold_map, decide,
                       region_modifiers, size_evidence)
from .geometry import BoundingBox, iou_matrix
from .proposal import (DEFAULT_BETA, DEFAULT_BUDGETS, DEFAULT_OVERSAMPLE, DEFAULT_TIERS, SizeTier,
                       gen_kdrp_regions, gen_srm_keypoints, make_keypoint_source)
from .scorers import Scorer, ScorerError
from .srm import SpatialRelationModel

logger = logging.getLogger(__name__)

MODES = ("sparcnn", "baseline")
SOURCE_KDRP = "KDRP"
SOURCE_SRM = "SRM"
DETECTIONS_SCHEMA = "srmdet.detections"


@dataclass(frozen=True)
class Detection:
    class_label: str
    box: BoundingBox
    raw_score: float
    adjusted_score: float
    tier: str = ""
    pass_index: int = 0
    source: str = SOURCE_KDRP

    def to_record(self) -> dict:
        return {
            "class": self.class_label, "box": list(self.box.as_tuple()),
            "raw_score": self.raw_score, "adjusted_score": self.adjusted_score,
            "tier": self.tier, "pass_index": self.pass_index, "source": self.source,
        }

    @classmethod
    def from_record(cls, r: dict) -> "Detection":
        return cls(r["class"], BoundingBox.from_sequence(r["box"]), float(r["raw_score"]),
                   float(r.get("adjusted_score", r["raw_score"])), r.get("tier", ""),
                   int(r.get("pass_index", 0)), r.get("source", SOURCE_KDRP))


@dataclass
class EngineConfig:
    policy: DetectionPolicy = DEFAULT_POLICY
    tiers: tuple[SizeTier, ...] = DEFAULT_TIERS
    budgets: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_BUDGETS))
    beta: int = DEFAULT_BETA
    oversample: int = DEFAULT_OVERSAMPLE
    nms_iou: float = 0.3
    max_passes_per_tier: int = 8
    mode: str = "sparcnn"
    seed: int = 0
    # "replace": SRM passes rank windows by SRM keypoints only; "augment"
    # adds the image keypoints back in.
    srm_keypoints: str = "replace"
    keypoint_source: dict = field(default_factory=lambda: {"name": "ground-truth"})

    def __post_init__(self):
        if not 0 < self.nms_iou < 1:
            raise ValueError("nms_iou must be in (0, 1)")
        if self.max_passes_per_tier < 1:
            raise ValueError("max_passes_per_tier must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.srm_keypoints not in ("replace", "augment"):
            raise ValueError("srm_keypoints must be 'replace' or 'augment'")
        if self.beta < 1:
            raise ValueError("beta must be >= 1")
        for t in self.tiers:
            if self.budgets.get(t.name, 0) < 1:
                raise ValueError(f"missing or non-positive region budget for tier {t.name}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tiers"] = [asdict(t) for t in self.tiers]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EngineConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown engine config keys: {sorted(unknown)}")
        if "policy" in d:
            pol = dict(d["policy"])
            bad = set(pol) - set(DetectionPolicy.__dataclass_fields__)
            if bad:
                raise ValueError(f"unknown policy keys: {sorted(bad)}")
            d["policy"] = DetectionPolicy(**pol)
        if "tiers" in d:
            d["tiers"] = tuple(SizeTier(**t) for t in d["tiers"])
        return cls(**d)


@dataclass(frozen=True)
class PassRecord:
    tier: str
    pass_index: int
    source: str
    regions: int
    candidates: int
    confirmed: int


def nms(candidates: Sequence[Detection], confirmed: Sequence[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy same-class suppression by descending adjusted score.

    Candidates overlapping an already-confirmed same-class detection above
    ``iou_thresh`` are dropped as well.
    """
    order = sorted(range(len(candidates)), key=lambda i: -candidates[i].adjusted_score)
    kept: list[Detection] = []
    by_class: dict[str, list[tuple]] = {}
    for d in confirmed:
        by_class.setdefault(d.class_label, []).append(d.box.as_tuple())
    for i in order:
        c = candidates[i]
        others = by_class.setdefault(c.class_label, [])
        if others and iou_matrix(np.array([c.box.as_tuple()]), np.array(others)).max() > iou_thresh:
            continue
        kept.append(c)
        others.append(c.box.as_tuple())
    return kept


def _scene_key(scene_id: str) -> int:
    return int.from_bytes(hashlib.blake2b(scene_id.encode("utf-8"), digest_size=4).digest(), "little")


def _rng(config: EngineConfig, scene: Scene, *stream: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, _scene_key(scene.scene_id), *stream])


def _scorer_for(scorer, tier: SizeTier) -> Scorer:
    return scorer[tier.name] if isinstance(scorer, Mapping) else scorer


def _candidates(scores: np.ndarray, regions: np.ndarray, classes: list[str], floor: float):
    """(region index, class index, raw score) for every entry at or above ``floor``."""
    r_idx, c_idx = np.nonzero(scores[:, : len(classes)] >= floor)
    return r_idx, c_idx, scores[r_idx, c_idx]


def _run_pass(scene: Scene, srm: SpatialRelationModel, scorer: Scorer, config: EngineConfig,
              tier: SizeTier, tier_index: int, pass_index: int, keypoints: np.ndarray, confirmed: list[Detection],
              use_evidence: bool) -> tuple[list[Detection], int, int]:
    policy = config.policy
    source = SOURCE_KDRP if pass_index == 0 else SOURCE_SRM
    props = gen_kdrp_regions(keypoints, tier, config.budgets[tier.name], scene.extent,
                             _rng(config, scene, 1, tier_index, pass_index),
                             oversample=config.oversample, source=source)
    regions = props.regions
    scores = np.asarray(scorer.score(scene.scene_id, regions), dtype=float)
    if scores.shape != (len(regions), srm.n + 1):
        raise ScorerError(f"scorer returned shape {scores.shape} for {len(regions)} regions and {srm.n} classes")
    floor = policy.signal_floor if use_evidence else max(policy.signal_floor, policy.base_tp)
    r_idx, c_idx, raw = _candidates(scores, regions, srm.classes, floor)

    accepted = []
    if len(r_idx):
        if use_evidence:
            tmap = build_threshold_map(scene.extent, confirmed, srm, policy)
            mods = region_modifiers(tmap, regions[r_idx])[np.arange(len(r_idx)), c_idx]
        else:
            mods = np.zeros(len(r_idx))
        for k in range(len(r_idx)):
            box = BoundingBox(*map(float, regions[r_idx[k]]))
            label = srm.classes[c_idx[k]]
            threshold = policy.clamp(policy.base_tp - mods[k])
            if use_evidence:
                d = decide(float(raw[k]), aspect_evidence(box, label, srm, policy),
                           size_evidence(box, label, confirmed, srm, policy), threshold, policy)
            else:
                d = decide(float(raw[k]), None, None, threshold, policy)
            if d.accept:
                accepted.append(Detection(label, box, float(raw[k]), d.region_score, tier.name, pass_index, source))
    survivors = nms(accepted, confirmed, config.nms_iou)
    return survivors, len(regions), len(r_idx)


def detect_scene(scene: Scene, srm: SpatialRelationModel, scorer: Scorer | Mapping[str, Scorer],
                 config: EngineConfig, trace: list | None = None) -> list[Detection]:
    """Run the configured mode on one scene; append PassRecords to ``trace``."""
    recursive = config.mode == "sparcnn"
    source = make_keypoint_source(**_source_kwargs(config.keypoint_source))
    image_kp = source(scene, _rng(config, scene, 0))
    confirmed: list[Detection] = []
    for t_idx, tier in enumerate(config.tiers):
        sc = _scorer_for(scorer, tier)
        for pass_index in range(config.max_passes_per_tier if recursive else 1):
            if pass_index == 0:
                keypoints = image_kp
            else:
                keypoints = gen_srm_keypoints(srm, confirmed, scene.extent, config.beta,
                                              _rng(config, scene, 2, t_idx, pass_index))
                if len(keypoints) == 0:
                    break
                if config.srm_keypoints == "augment":
                    keypoints = np.concatenate([keypoints, image_kp])
            new, n_regions, n_cand = _run_pass(scene, srm, sc, config, tier, t_idx, pass_index, keypoints,
                                               confirmed, use_evidence=recursive)
            confirmed.extend(new)
            if trace is not None:
                trace.append(PassRecord(tier.name, pass_index, SOURCE_KDRP if pass_index == 0 else SOURCE_SRM,
                                        n_regions, n_cand, len(new)))
            if not new:
                break
    return confirmed


def _source_kwargs(spec: Mapping) -> dict:
    spec = dict(spec)
    return {"name": spec.pop("name", "ground-truth"), **spec}


def detect_recursive(scene: Scene, srm: SpatialRelationModel, scorer, config: EngineConfig,
                     trace: list | None = None) -> list[Detection]:
    """Contextual detection: KDRP first pass, then SRM-guided passes with evidence."""
    return detect_scene(scene, srm, scorer, _with_mode(config, "sparcnn"), trace)


def detect_baseline(scene: Scene, srm: SpatialRelationModel, scorer, config: EngineConfig,
                    trace: list | None = None) -> list[Detection]:
    """One KDRP pass per tier, raw-score acceptance, NMS. ``srm`` supplies only the vocabulary."""
    return detect_scene(scene, srm, scorer, _with_mode(config, "baseline"), trace)


def _with_mode(config: EngineConfig, mode: str) -> EngineConfig:
    if config.mode == mode:
        return config
    return EngineConfig(**{**config.__dict__, "mode": mode})


# ---------------------------------------------------------------------------
# Corpus runs and detection files
# ---------------------------------------------------------------------------

@dataclass
class SceneResult:
    scene_id: str
    detections: list[Detection]
    error: str | None = None

    def to_record(self) -> dict:
        return {"scene_id": self.scene_id, "detections": [d.to_record() for d in self.detections],
                "error": self.error}


def run_corpus(scenes: Iterable[Scene], srm: SpatialRelationModel, scorer, config: EngineConfig,
               workers: int | None = None) -> list[SceneResult]:
    """Detect on every scene; a scorer failure marks only that scene as failed.

    Results are sorted by scene id whatever the execution order. Exclusive
    scorers force sequential execution.
    """
    scenes = list(scenes)
    scorers = scorer.values() if isinstance(scorer, Mapping) else [scorer]
    if workers is None:
        workers = int(os.environ.get("SRMDET_WORKERS", "1"))
    if any(getattr(s, "exclusive", True) for s in scorers):
        workers = 1

    def one(scene: Scene) -> SceneResult:
        try:
            return SceneResult(scene.scene_id, detect_scene(scene, srm, scorer, config))
        except ScorerError as exc:
            logger.error("scene %s failed: %s", scene.scene_id, exc)
            return SceneResult(scene.scene_id, [], str(exc))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, scenes))
    else:
        results = [one(s) for s in scenes]
    return sorted(results, key=lambda r: r.scene_id)


def write_detections(results: Sequence[SceneResult], stream: IO[str], mode: str, classes: Sequence[str]) -> None:
    stream.write(json.dumps({"format": DETECTIONS_SCHEMA, "version": 1, "mode": mode,
                             "classes": list(classes)}) + "\n")
    for r in sorted(results, key=lambda r: r.scene_id):
        stream.write(json.dumps(r.to_record()) + "\n")


def read_detections(stream: IO[str]) -> tuple[dict, list[SceneResult]]:
    header = None
    results = []
    for lineno, line in enumerate(stream, 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        if header is None:
            if rec.get("format") != DETECTIONS_SCHEMA:
                raise ValueError(f"line {lineno}: missing detections header")
            header = rec
            continue
        results.append(SceneResult(rec["scene_id"], [Detection.from_record(d) for d in rec["detections"]],
                                   rec.get("error")))
    if header is None:
        raise ValueError("empty detections file (no header)")
    return header, results
