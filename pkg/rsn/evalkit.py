# rsn/evalkit.py
"""
Detection evaluation (AP and heading-weighted APH) and 3D weighted boxes
fusion with test-time augmentation.
"""
from __future__ import annotations

from dataclasses import dataclass
import logging
import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import Box7, Detection, RigidTransform, Rng, wrap_angle
from .errors import UndefinedMetricError
from .geometry import iou_function, iou_matrix

logger = logging.getLogger(__name__)

DEFAULT_CLUSTER_IOU = 0.55
DISTANCE_BUCKETS: Tuple[Tuple[float, float], ...] = ((0.0, 30.0), (30.0, 50.0), (50.0, math.inf))


# -------------------------
# Matching and AP
# -------------------------

@dataclass(frozen=True)
class MatchResult:
    """Per detection (input order): matched gt index or -1, IoU and wrapped heading error."""
    matched_gt: np.ndarray
    iou: np.ndarray
    heading_error: np.ndarray

    @property
    def true_positive(self) -> np.ndarray:
        return self.matched_gt >= 0

    @property
    def heading_weight(self) -> np.ndarray:
        weight = np.maximum(0.0, 1.0 - np.abs(np.nan_to_num(self.heading_error)) / math.pi)
        return np.where(self.true_positive, weight, 0.0)


def score_order(detections: Sequence[Detection]) -> np.ndarray:
    scores = np.array([d.score for d in detections], dtype=np.float64)
    return np.argsort(-scores, kind="stable")


def match_detections(dets: Sequence[Detection], gts: Sequence[Box7], iou_threshold: float,
                     mode: str = "3D") -> MatchResult:
    """Greedy matching by descending score to the best unmatched ground truth."""
    n = len(dets)
    matched = np.full(n, -1, dtype=np.int64)
    ious = np.zeros(n)
    heading = np.full(n, np.nan)
    if n == 0 or len(gts) == 0:
        return MatchResult(matched, ious, heading)

    overlap = iou_matrix([d.box for d in dets], gts, mode)
    taken = np.zeros(len(gts), dtype=bool)
    for i in score_order(dets):
        candidates = np.where(taken, -1.0, overlap[i])
        j = int(np.argmax(candidates))
        if candidates[j] >= iou_threshold:
            taken[j] = True
            matched[i] = j
            ious[i] = overlap[i, j]
            heading[i] = wrap_angle(dets[i].box.theta - gts[j].theta)
    return MatchResult(matched, ious, heading)


def _step_area(recall: np.ndarray, precision: np.ndarray) -> float:
    previous = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - previous) * precision))


def ap_from_matches(scores: np.ndarray, true_positive: np.ndarray, weights: np.ndarray,
                    num_gt: int) -> Tuple[float, float]:
    """Area under the exact PR step curve, cut at every distinct score."""
    if num_gt <= 0:
        raise UndefinedMetricError("Average precision is undefined without ground truths")
    if len(scores) == 0:
        return 0.0, 0.0
    order = np.argsort(-scores, kind="stable")
    scores, tp, w = scores[order], true_positive[order].astype(np.float64), weights[order]
    tp_cum = np.cumsum(tp)
    tph_cum = np.cumsum(w)
    count = np.arange(1, len(scores) + 1, dtype=np.float64)

    # last index of each tied-score run
    cuts = np.flatnonzero(np.append(scores[1:] != scores[:-1], True))
    tp_cum, tph_cum, count = tp_cum[cuts], tph_cum[cuts], count[cuts]
    ap = _step_area(tp_cum / num_gt, tp_cum / count)
    aph = _step_area(tph_cum / num_gt, tph_cum / count)
    return ap, aph


def evaluate_scenes(scenes: Sequence[Tuple[Sequence[Detection], Sequence[Box7]]],
                    iou_threshold: float = 0.7, mode: str = "3D") -> Tuple[float, float]:
    """AP/APH with per-scene matching and a single precision-recall curve over all scenes."""
    iou_function(mode)
    scores, tp, weights = [], [], []
    num_gt = 0
    for dets, gts in scenes:
        result = match_detections(dets, gts, iou_threshold, mode)
        scores.extend(d.score for d in dets)
        tp.append(result.true_positive)
        weights.append(result.heading_weight)
        num_gt += len(gts)
    if num_gt == 0:
        raise UndefinedMetricError("Average precision is undefined without ground truths")
    return ap_from_matches(
        np.array(scores, dtype=np.float64),
        np.concatenate(tp) if tp else np.zeros(0, dtype=bool),
        np.concatenate(weights) if weights else np.zeros(0),
        num_gt,
    )


def evaluate_ap(dets: Sequence[Detection], gts: Sequence[Box7], iou_threshold: float = 0.7,
                mode: str = "3D") -> Tuple[float, float]:
    return evaluate_scenes([(dets, gts)], iou_threshold, mode)


def _bev_range(box: Box7) -> float:
    return math.hypot(box.cx, box.cy)


def bucket_label(bucket: Tuple[float, float]) -> str:
    lo, hi = bucket
    return f"{lo:g}-{hi:g}m" if math.isfinite(hi) else f"{lo:g}m+"


def evaluate_by_distance(scenes: Sequence[Tuple[Sequence[Detection], Sequence[Box7]]],
                         iou_threshold: float = 0.7, mode: str = "3D",
                         buckets: Sequence[Tuple[float, float]] = DISTANCE_BUCKETS) -> Dict[str, Optional[Dict]]:
    """
    AP/APH per BEV range bucket; detections and ground truths are both
    filtered by their center distance. Buckets without ground truth map to None.
    """
    report: Dict[str, Optional[Dict]] = {}
    for bucket in buckets:
        lo, hi = bucket
        subset = []
        for dets, gts in scenes:
            subset.append((
                [d for d in dets if lo <= _bev_range(d.box) < hi],
                [g for g in gts if lo <= _bev_range(g) < hi],
            ))
        num_gt = sum(len(g) for _, g in subset)
        if num_gt == 0:
            report[bucket_label(bucket)] = None
            continue
        ap, aph = evaluate_scenes(subset, iou_threshold, mode)
        report[bucket_label(bucket)] = {
            "ap": ap, "aph": aph, "num_gt": num_gt, "num_det": sum(len(d) for d, _ in subset),
        }
    return report


def evaluation_report(scenes: Sequence[Tuple[Sequence[Detection], Sequence[Box7], Sequence[int]]],
                      iou_thresholds: Dict[int, float], mode: str = "3D",
                      class_names: Optional[Dict[int, str]] = None) -> Dict[str, Dict]:
    """Per-class {ap, aph, mode, iou_threshold, num_gt, num_det}; classes without ground truth are skipped."""
    report = {}
    for class_id, threshold in sorted(iou_thresholds.items()):
        per_class = [
            ([d for d in dets if d.class_id == class_id],
             [g for g, c in zip(gts, gt_classes) if c == class_id])
            for dets, gts, gt_classes in scenes
        ]
        num_gt = sum(len(g) for _, g in per_class)
        name = (class_names or {}).get(class_id, str(class_id))
        if num_gt == 0:
            logger.info("No ground truth for class %s; skipped", name)
            continue
        ap, aph = evaluate_scenes(per_class, threshold, mode)
        report[name] = {
            "ap": ap,
            "aph": aph,
            "mode": mode.upper(),
            "iou_threshold": threshold,
            "num_gt": num_gt,
            "num_det": sum(len(d) for d, _ in per_class),
        }
    return report


# -------------------------
# Weighted boxes fusion
# -------------------------

@dataclass
class FusionCluster:
    members: List[Tuple[Detection, int]]
    fused: Detection
    num_sets: int

    @property
    def sources(self) -> int:
        return len({src for _, src in self.members})

    def add(self, detection: Detection, source: int) -> None:
        self.members.append((detection, source))
        self.fused = fuse_members(self.members, self.num_sets)


def _canonical_key(item: Tuple[Detection, int]):
    d = item[0]
    b = d.box
    return (-d.score, b.cx, b.cy, b.cz, b.l, b.w, b.h, b.theta, d.class_id)


def fuse_members(members: Sequence[Tuple[Detection, int]], num_sets: int) -> Detection:
    """
    Score-weighted box average; yaw is the circular mean of 2*theta taken
    relative to the top-scoring member, halved.
    """
    detections = [d for d, _ in members]
    sources = len({src for _, src in members})
    scores = np.array([d.score for d in detections])
    mean_score = float(scores.mean()) * min(sources, num_sets) / num_sets
    top = detections[0]
    if len(detections) == 1:
        return Detection(top.box, mean_score, top.class_id)

    weights = scores if scores.sum() > 0 else np.ones_like(scores)
    geometry = np.array([d.box.as_array()[:6] for d in detections])
    cx, cy, cz, l, w, h = np.average(geometry, axis=0, weights=weights)

    delta = np.array([wrap_angle(d.box.theta - top.box.theta) for d in detections])
    offset = 0.5 * math.atan2(float(np.sum(weights * np.sin(2 * delta))),
                              float(np.sum(weights * np.cos(2 * delta))))
    theta = wrap_angle(top.box.theta + offset)
    return Detection(Box7(cx, cy, cz, l, w, h, theta), mean_score, top.class_id)


def wbf_3d(det_sets: Sequence[Sequence[Detection]], iou_cluster_threshold: float = DEFAULT_CLUSTER_IOU,
           mode: str = "3D") -> List[Detection]:
    """Fuse several detection sets; clusters only form within a class."""
    if len(det_sets) == 0:
        raise ValueError("wbf_3d needs at least one detection set")
    iou_fn = iou_function(mode)
    pooled = sorted(((d, src) for src, ds in enumerate(det_sets) for d in ds), key=_canonical_key)

    clusters: List[FusionCluster] = []
    for det, src in pooled:
        for cluster in clusters:
            if cluster.fused.class_id == det.class_id and iou_fn(cluster.fused.box, det.box) >= iou_cluster_threshold:
                cluster.add(det, src)
                break
        else:
            clusters.append(FusionCluster([(det, src)], fuse_members([(det, src)], len(det_sets)), len(det_sets)))

    logger.debug("wbf_3d: %d detections from %d sets -> %d clusters", len(pooled), len(det_sets), len(clusters))
    fused = [c.fused for c in clusters]
    order = np.argsort([-d.score for d in fused], kind="stable")
    return [fused[i] for i in order]


# -------------------------
# Test-time augmentation
# -------------------------

def random_augmentations(rng: Rng, count: int, max_rotation: float = math.pi / 4,
                         max_translation: float = 1.0, include_identity: bool = True) -> List[RigidTransform]:
    """Random yaw rotations with planar translations; optionally the identity first."""
    augmentations = [RigidTransform()] if include_identity and count > 0 else []
    while len(augmentations) < count:
        yaw = float(rng.uniform(-max_rotation, max_rotation))
        tx, ty = rng.uniform(-max_translation, max_translation, size=2)
        augmentations.append(RigidTransform(yaw=yaw, translation=(float(tx), float(ty), 0.0)))
    return augmentations


def tta_wrap(run: Callable, scene, augmentations: Sequence[RigidTransform]) -> List[List[Detection]]:
    """
    One detection set per augmentation, mapped back into the original frame.

    ``scene`` is either a point array or an object with ``transformed(t)``.
    """
    sets = []
    for transform in augmentations:
        if isinstance(scene, np.ndarray):
            view = transform.apply_points(scene)
        else:
            view = scene.transformed(transform)
        detections = run(view)
        sets.append(transform.inverse().apply_detections(detections))
    return sets
