"""Detection outcome matching, count metrics, interpolated AP and A/B reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dataset import Scene
from .geometry import iou

TP, FP, IGNORED = "TP", "FP", "IGNORED"
MATCHED, FN = "MATCHED", "FN"
INCLUDE, IGNORE = "include", "ignore"
METRIC_NAMES = ("accuracy", "recall", "precision", "f1", "mAP")
REPORT_SCHEMA = "srmdet.report"


class EvaluationError(ValueError):
    pass


@dataclass
class MatchOutcome:
    """Per-detection and per-ground-truth outcomes for one scene.

    ``detections[i]`` is ``(TP|FP|IGNORED, gt_index or None)`` for the i-th
    input detection; ``ground_truth[j]`` is ``MATCHED``, ``FN`` or
    ``IGNORED``.
    """

    detections: list[tuple[str, int | None]]
    ground_truth: list[str]

    @property
    def tp(self) -> int:
        return sum(1 for o, _ in self.detections if o == TP)

    @property
    def fp(self) -> int:
        return sum(1 for o, _ in self.detections if o == FP)

    @property
    def fn(self) -> int:
        return self.ground_truth.count(FN)

    @property
    def ignored(self) -> int:
        return self.ground_truth.count(IGNORED)


def _check_policy(policy: str):
    if policy not in (INCLUDE, IGNORE):
        raise EvaluationError(f"difficult policy must be {INCLUDE!r} or {IGNORE!r}, got {policy!r}")


def match_detections(dets: Sequence, gt: Scene, iou_thresh: float = 0.5,
                     difficult_policy: str = IGNORE) -> MatchOutcome:
    """Greedy matching in descending score order.

    Each detection claims the unmatched same-class object of highest IoU
    above ``iou_thresh`` (ties go to the earlier object). Under the ignore
    policy a claim on a difficult object makes the detection neither TP nor
    FP, and difficult objects never count as misses.
    """
    _check_policy(difficult_policy)
    ignore = difficult_policy == IGNORE
    gt_state = [IGNORED if (ignore and o.difficult) else FN for o in gt.objects]
    taken = [False] * len(gt.objects)
    out: list[tuple[str, int | None]] = [(FP, None)] * len(dets)
    order = sorted(range(len(dets)), key=lambda i: -dets[i].adjusted_score)
    for i in order:
        d = dets[i]
        best, best_iou = None, iou_thresh
        for j, o in enumerate(gt.objects):
            if o.class_label != d.class_label or taken[j]:
                continue
            v = iou(d.box, o.box)
            if v > best_iou:
                best, best_iou = j, v
        if best is None:
            out[i] = (FP, None)
        elif ignore and gt.objects[best].difficult:
            out[i] = (IGNORED, best)
        else:
            out[i] = (TP, best)
            taken[best] = True
            gt_state[best] = MATCHED
    return MatchOutcome(out, gt_state)


@dataclass
class MetricsReport:
    tp: int
    fp: int
    fn: int
    accuracy: float
    recall: float
    precision: float
    f1: float
    ap: dict[str, float] = field(default_factory=dict)
    mAP: float = 0.0
    degenerate: bool = False

    def to_record(self) -> dict:
        return {k: getattr(self, k) for k in
                ("tp", "fp", "fn", "accuracy", "recall", "precision", "f1", "ap", "mAP", "degenerate")}


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def compute_metrics(outcome: MatchOutcome | tuple[int, int, int]) -> MetricsReport:
    """Accuracy TP/(TP+FP+FN), recall, precision and F1 = 2TP/(2TP+FP+FN).

    Undefined ratios are reported as 0 and the report flagged degenerate.
    """
    tp, fp, fn = (outcome.tp, outcome.fp, outcome.fn) if isinstance(outcome, MatchOutcome) else outcome
    if min(tp, fp, fn) < 0:
        raise EvaluationError("counts must be non-negative")
    return MetricsReport(
        tp=tp, fp=fp, fn=fn,
        accuracy=_ratio(tp, tp + fp + fn),
        recall=_ratio(tp, tp + fn),
        precision=_ratio(tp, tp + fp),
        f1=_ratio(2 * tp, 2 * tp + fp + fn),
        degenerate=(tp + fp + fn == 0) or tp + fp == 0 or tp + fn == 0,
    )


# ---------------------------------------------------------------------------
# Average precision
# ---------------------------------------------------------------------------

def pr_curve(label: str, detections: Mapping[str, Sequence], ground_truth: Mapping[str, Scene],
             iou_thresh: float = 0.5, difficult_policy: str = IGNORE) -> tuple[np.ndarray, np.ndarray, int]:
    """Cumulative (recall, precision) after each ranked non-ignored detection.

    Returns ``(recall, precision, n_positives)``.
    """
    _check_policy(difficult_policy)
    ranked = []
    for k, (scene_id, dets) in enumerate(detections.items()):
        for i, d in enumerate(dets):
            if d.class_label == label:
                ranked.append((-d.adjusted_score, k, i, scene_id, d))
    ranked.sort(key=lambda t: t[:3])
    npos = sum(1 for s in ground_truth.values() for o in s.objects
               if o.class_label == label and not (difficult_policy == IGNORE and o.difficult))

    taken: dict[str, list[bool]] = {sid: [False] * len(s.objects) for sid, s in ground_truth.items()}
    flags = []
    for *_, scene_id, d in ranked:
        scene = ground_truth[scene_id]
        best, best_iou = None, iou_thresh
        for j, o in enumerate(scene.objects):
            if o.class_label != label or taken[scene_id][j]:
                continue
            v = iou(d.box, o.box)
            if v > best_iou:
                best, best_iou = j, v
        if best is None:
            flags.append(0)
        elif difficult_policy == IGNORE and scene.objects[best].difficult:
            continue
        else:
            taken[scene_id][best] = True
            flags.append(1)
    flags = np.asarray(flags, dtype=float)
    tp = np.cumsum(flags)
    fp = np.cumsum(1.0 - flags)
    recall = tp / npos if npos else np.zeros_like(tp)
    precision = tp / np.maximum(tp + fp, 1e-300)
    return recall, precision, npos


def interpolated_ap(recall: np.ndarray, precision: np.ndarray, eleven_point: bool = False) -> float:
    """Area under the monotone precision envelope of a PR curve."""
    recall = np.asarray(recall, dtype=float)
    precision = np.asarray(precision, dtype=float)
    if eleven_point:
        total = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            mask = recall >= t
            total += precision[mask].max() if mask.any() else 0.0
        return total / 11.0
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(label: str, detections: Mapping[str, Sequence], ground_truth: Mapping[str, Scene],
                      iou_thresh: float = 0.5, difficult_policy: str = IGNORE,
                      eleven_point: bool = False) -> float | None:
    """Interpolated AP for one class over a corpus; ``None`` without positives."""
    recall, precision, npos = pr_curve(label, detections, ground_truth, iou_thresh, difficult_policy)
    if npos == 0:
        return None
    return interpolated_ap(recall, precision, eleven_point)


# ---------------------------------------------------------------------------
# Corpus evaluation and reports
# ---------------------------------------------------------------------------

def _as_gt_map(ground_truth) -> dict[str, Scene]:
    if isinstance(ground_truth, Mapping):
        return dict(ground_truth)
    return {s.scene_id: s for s in ground_truth}


def evaluate(detections: Mapping[str, Sequence], ground_truth: Sequence[Scene] | Mapping[str, Scene],
             iou_thresh: float = 0.5, difficult_policy: str = IGNORE, eleven_point: bool = False) -> MetricsReport:
    """Pool outcome counts over scenes and compute per-class AP and mAP.

    Scenes without an entry in ``detections`` count as having no detections;
    detections for scenes absent from the ground truth are an error.
    """
    gt = _as_gt_map(ground_truth)
    extra = set(detections) - set(gt)
    if extra:
        raise EvaluationError(f"detections for scenes without ground truth: {sorted(extra)[:5]}")
    tp = fp = fn = 0
    for sid, scene in gt.items():
        o = match_detections(detections.get(sid, []), scene, iou_thresh, difficult_policy)
        tp, fp, fn = tp + o.tp, fp + o.fp, fn + o.fn
    report = compute_metrics((tp, fp, fn))
    dets = {sid: detections.get(sid, []) for sid in gt}
    labels = sorted({o.class_label for s in gt.values() for o in s.objects})
    for label in labels:
        ap = average_precision(label, dets, gt, iou_thresh, difficult_policy, eleven_point)
        if ap is not None:
            report.ap[label] = ap
    report.mAP = float(np.mean(list(report.ap.values()))) if report.ap else 0.0
    return report


def pct_change(baseline: float, treatment: float) -> float | None:
    """100 * (treatment - baseline) / baseline; ``None`` when undefined."""
    if baseline == 0:
        return 0.0 if treatment == 0 else None
    return 100.0 * (treatment - baseline) / baseline


@dataclass
class ABReport:
    baseline: MetricsReport
    sparcnn: MetricsReport
    change: dict[str, float | None]

    def to_record(self) -> dict:
        return {"format": REPORT_SCHEMA, "version": 1, "kind": "ab",
                "baseline": self.baseline.to_record(), "sparcnn": self.sparcnn.to_record(),
                "pct_change": self.change}

    def table(self) -> str:
        lines = [f"{'METRIC':<10}{'BASELINE':>10}{'SPARCNN':>10}{'%CHANGE':>10}"]
        for name in METRIC_NAMES:
            b, s = getattr(self.baseline, name), getattr(self.sparcnn, name)
            c = self.change[name]
            cs = "n/a" if c is None else f"{c:.2f}"
            lines.append(f"{name.upper():<10}{100 * b:>10.2f}{100 * s:>10.2f}{cs:>10}")
        return "\n".join(lines) + "\n"


def ab_report(baseline_runs: Mapping[str, Sequence], sparcnn_runs: Mapping[str, Sequence],
              ground_truth, iou_thresh: float = 0.5, difficult_policy: str = IGNORE) -> ABReport:
    if set(baseline_runs) != set(sparcnn_runs):
        raise EvaluationError("baseline and treatment runs cover different scene sets")
    b = evaluate(baseline_runs, ground_truth, iou_thresh, difficult_policy)
    s = evaluate(sparcnn_runs, ground_truth, iou_thresh, difficult_policy)
    change = {name: pct_change(getattr(b, name), getattr(s, name)) for name in METRIC_NAMES}
    return ABReport(b, s, change)


def metrics_record(report: MetricsReport) -> dict:
    return {"format": REPORT_SCHEMA, "version": 1, "kind": "metrics", **report.to_record()}


def metrics_table(report: MetricsReport) -> str:
    rows = [("TP", f"{report.tp}"), ("FP", f"{report.fp}"), ("FN", f"{report.fn}")]
    rows += [(n.upper(), f"{100 * getattr(report, n):.2f}") for n in METRIC_NAMES]
    rows += [(f"AP[{k}]", f"{100 * v:.2f}") for k, v in sorted(report.ap.items())]
    return "".join(f"{k:<16}{v:>10}\n" for k, v in rows)


def dump_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True) + "\n"
