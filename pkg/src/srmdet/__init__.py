"""Context-driven object detection orchestration.

A spatial relation model learned from annotated scenes steers recursive,
size-tiered region proposal and nudges detection thresholds around objects
that have already been confirmed. Region scoring is pluggable.
"""

__version__ = "0.1.0"

from .geometry import BoundingBox, ImageExtent, aspect_ratio, clamp_box, iou, zone_overlap
from .dataset import GroundTruthObject, PlacementRule, Scene, SceneProfile, generate_scenes, parse_voc_xml
from .srm import SpatialRelationModel, load_srm, mirror_lr, save_srm, train_srm
from .proposal import SizeTier, allocate_counts, gen_kdrp_regions, gen_srm_keypoints
from .evidence import DetectionPolicy, build_threshold_map, decide, region_threshold
from .detect import Detection, EngineConfig, detect_baseline, detect_recursive, nms, run_corpus
from .scorers import ExternalScorer, OracleScorer, ScorerError
from .evaluation import ab_report, average_precision, compute_metrics, evaluate, match_detections

__all__ = [
    "BoundingBox", "ImageExtent", "aspect_ratio", "clamp_box", "iou", "zone_overlap",
    "GroundTruthObject", "PlacementRule", "Scene", "SceneProfile", "generate_scenes", "parse_voc_xml",
    "SpatialRelationModel", "load_srm", "mirror_lr", "save_srm", "train_srm",
    "SizeTier", "allocate_counts", "gen_kdrp_regions", "gen_srm_keypoints",
    "DetectionPolicy", "build_threshold_map", "decide", "region_threshold",
    "Detection", "EngineConfig", "detect_baseline", "detect_recursive", "nms", "run_corpus",
    "ExternalScorer", "OracleScorer", "ScorerError",
    "ab_report", "average_precision", "compute_metrics", "evaluate", "match_detections",
]
