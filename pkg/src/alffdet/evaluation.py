"""IoU, greedy detection matching, average precision, and density splits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Box


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise EvaluationError(f"score {self.score} outside [0, 1]")


# per-image scored predictions / labeled truths, keyed by image id
DetectionSet = dict[int, list[Detection]]
GroundTruthSet = dict[int, list[Box]]


@dataclass
class MatchResult:
    tp: np.ndarray          # per-detection true-positive flags
    fp: np.ndarray          # per-detection false-positive flags
    gt_matched: np.ndarray  # per-ground-truth matched flags


@dataclass(frozen=True)
class DatasetStats:
    heads_per_image: float
    split: str  # "low" | "high"


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def match_detections(dets: list[Detection], gts: list[Box], iou_thr: float) -> MatchResult:
    """Greedy matching in descending score order (ties by input index).

    Each detection takes the highest-IoU still-unmatched ground truth with
    IoU >= iou_thr; every ground truth is matched at most once.
    """
    order = sorted(range(len(dets)), key=lambda k: (-dets[k].score, k))
    tp = np.zeros(len(dets), dtype=bool)
    gt_matched = np.zeros(len(gts), dtype=bool)
    for k in order:
        best_iou, best_j = iou_thr, -1
        for j, g in enumerate(gts):
            if gt_matched[j]:
                continue
            v = iou(dets[k].box, g)
            if v >= best_iou and (best_j < 0 or v > best_iou):
                best_iou, best_j = v, j
        if best_j >= 0:
            tp[k] = True
            gt_matched[best_j] = True
    return MatchResult(tp=tp, fp=~tp, gt_matched=gt_matched)


def average_precision(dets: DetectionSet, gts: GroundTruthSet, iou_thr: float) -> float:
    """101-point interpolated AP at one IoU threshold over a set of images."""
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return 0.0
    scored = []  # (score, image insertion order, in-image index, tp flag)
    for img_pos, (img_id, img_dets) in enumerate(dets.items()):
        res = match_detections(img_dets, gts.get(img_id, []), iou_thr)
        for k, d in enumerate(img_dets):
            scored.append((d.score, img_pos, k, res.tp[k]))
    if not scored:
        return 0.0
    scored.sort(key=lambda t: (-t[0], t[1], t[2]))
    tp_flags = np.array([t[3] for t in scored], dtype=np.float64)
    tp_cum = np.cumsum(tp_flags)
    fp_cum = np.cumsum(1.0 - tp_flags)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 101.0


def ap_range(dets: DetectionSet, gts: GroundTruthSet) -> tuple[float, float, float]:
    """(AP50, AP75, AP50-95); the last averages thresholds 0.50:0.05:0.95."""
    thresholds = [0.5 + 0.05 * k for k in range(10)]
    aps = [average_precision(dets, gts, t) for t in thresholds]
    return aps[0], aps[5], float(np.mean(aps))


def density_split(per_image_counts: list[int] | np.ndarray) -> DatasetStats:
    """Label one scene's average head count as low (< 100) or high ([100, 300))."""
    counts = np.asarray(per_image_counts, dtype=np.float64)
    if counts.size == 0:
        raise EvaluationError("empty scene: no per-image counts")
    mean = float(counts.mean())
    if mean < 100.0:
        return DatasetStats(heads_per_image=mean, split="low")
    if mean < 300.0:
        return DatasetStats(heads_per_image=mean, split="high")
    raise EvaluationError(f"scene density {mean:.2f} outside the [0, 300) range")
