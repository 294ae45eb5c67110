# rsn/head.py
"""
Sparse center-heatmap head: heatmap targets, box encoding, the detection
loss stack with analytic gradients, and NMS-free decoding by submanifold
local-max selection.
"""
from __future__ import annotations

from dataclasses import dataclass
import logging
import math
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, log_expit, log_softmax, softmax

from .core import Box7, Detection, DetectorConfig, TWO_PI, points_in_box, wrap_angle
from .geometry import IouLossKind, iou_loss
from .sparse_engine import SparseTensor, build_rulebook_ssc, sparse_max_pool

logger = logging.getLogger(__name__)

MIN_BOX_DIM = 1e-3
# Bin assignment tolerance so angles on a bin edge land in the upper bin.
_BIN_EDGE_TOL = 1e-9


@dataclass(frozen=True)
class HeadSites:
    """Integer coordinates (for neighborhoods) and metric positions of head sites."""
    coords: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        if self.coords.shape != self.positions.shape:
            raise ValueError(f"coords {self.coords.shape} and positions {self.positions.shape} disagree")

    @property
    def dims(self) -> int:
        return self.coords.shape[1]

    @property
    def pillar(self) -> bool:
        return self.dims == 2

    def __len__(self) -> int:
        return len(self.coords)


@dataclass(frozen=True)
class HeadOutput:
    heatmap_logits: np.ndarray
    box_params: np.ndarray
    bin_logits: np.ndarray
    bin_residuals: np.ndarray

    def __post_init__(self):
        n = len(self.heatmap_logits)
        if self.box_params.shape != (n, 6):
            raise ValueError(f"box_params must be ({n}, 6), got {self.box_params.shape}")
        if self.bin_logits.shape[0] != n or self.bin_logits.shape != self.bin_residuals.shape:
            raise ValueError(
                f"bin arrays must be ({n}, B): logits {self.bin_logits.shape}, residuals {self.bin_residuals.shape}"
            )

    @property
    def num_bins(self) -> int:
        return self.bin_logits.shape[1]

    def __len__(self) -> int:
        return len(self.heatmap_logits)


@dataclass(frozen=True)
class HeadGradients:
    heatmap_logits: Optional[np.ndarray] = None
    box_params: Optional[np.ndarray] = None
    bin_logits: Optional[np.ndarray] = None
    bin_residuals: Optional[np.ndarray] = None


@dataclass(frozen=True)
class HeatmapTarget:
    heatmap: np.ndarray
    regression_mask: np.ndarray


@dataclass(frozen=True)
class RegressionTargets:
    site_index: np.ndarray
    box_index: np.ndarray
    params: np.ndarray
    bins: np.ndarray
    residuals: np.ndarray
    thetas: np.ndarray
    site_positions: np.ndarray
    num_bins: int

    def __len__(self) -> int:
        return len(self.site_index)


# -------------------------
# Head forward
# -------------------------

def head_layer_specs(in_channels: int, num_bins: int):
    width = 1 + 6 + 2 * num_bins
    return {"head.weight": (in_channels, width), "head.bias": (width,)}


def head_forward(features: np.ndarray, weights: Mapping[str, np.ndarray], num_bins: int) -> HeadOutput:
    """Single fully connected layer from site features to all head outputs."""
    w = weights["head.weight"]
    if w.shape[0] != features.shape[1]:
        raise ValueError(f"Head expects {w.shape[0]} input channels, got {features.shape[1]}")
    if w.shape[1] != 7 + 2 * num_bins:
        raise ValueError(f"Head weight width {w.shape[1]} does not match {num_bins} heading bins")
    out = features @ w + weights["head.bias"]
    return HeadOutput(
        heatmap_logits=out[:, 0].copy(),
        box_params=out[:, 1:7].copy(),
        bin_logits=out[:, 7:7 + num_bins].copy(),
        bin_residuals=out[:, 7 + num_bins:].copy(),
    )


# -------------------------
# Targets
# -------------------------

def compute_heatmap(sites: np.ndarray, boxes: Sequence[Box7], sigma: float, delta1: float = 0.2,
                    normalized: bool = True) -> HeatmapTarget:
    """
    h = max over containing boxes of exp(-(d - d_min) / sigma^2), where d_min
    is the smallest center distance among the box's own sites. (N, 2) sites
    use BEV containment and distance.
    """
    sites = np.asarray(sites, dtype=np.float64)
    if sites.ndim != 2 or len(sites) == 0:
        raise ValueError("compute_heatmap needs a non-empty (N, 2|3) site array")
    dims = sites.shape[1]
    heat = np.zeros(len(sites))
    for i, box in enumerate(boxes):
        inside = np.flatnonzero(points_in_box(sites, box, bev_only=dims == 2))
        if len(inside) == 0:
            logger.debug("heatmap: box %d contains no site", i)
            continue
        dist = np.linalg.norm(sites[inside] - box.center[:dims], axis=1)
        shift = dist.min() if normalized else 0.0
        heat[inside] = np.maximum(heat[inside], np.exp(-(dist - shift) / sigma ** 2))
    return HeatmapTarget(heatmap=heat, regression_mask=heat > delta1)


def encode_heading(theta, num_bins: int) -> Tuple[np.ndarray, np.ndarray]:
    """Bin index and half-bin-normalized residual; bin edges at -pi + k * 2pi / B."""
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    width = TWO_PI / num_bins
    wrapped = np.array([wrap_angle(t) for t in theta])
    bins = np.floor((wrapped + math.pi) / width + _BIN_EDGE_TOL).astype(np.int64)
    bins = np.clip(bins, 0, num_bins - 1)
    centers = -math.pi + (bins + 0.5) * width
    return bins, (wrapped - centers) / (0.5 * width)


def decode_heading(bin_index: int, residual: float, num_bins: int) -> float:
    width = TWO_PI / num_bins
    return wrap_angle(-math.pi + (bin_index + 0.5) * width + residual * 0.5 * width)


def _encode_params(box: Box7, site: np.ndarray) -> np.ndarray:
    dz = box.cz if len(site) == 2 else box.cz - site[2]
    return np.array([box.cx - site[0], box.cy - site[1], dz, box.l, box.w, box.h])


def encode_targets(sites: np.ndarray, boxes: Sequence[Box7], num_bins: int,
                   mask: Optional[np.ndarray] = None) -> RegressionTargets:
    """
    Regression targets at masked sites against their containing box
    (nearest center on ties). dz is the absolute box z for (N, 2) sites.
    """
    sites = np.asarray(sites, dtype=np.float64)
    dims = sites.shape[1]
    bev = dims == 2
    containment = np.array([points_in_box(sites, b, bev_only=bev) for b in boxes]).reshape(len(boxes), len(sites))
    if mask is None:
        mask = containment.any(axis=0)
    site_index = np.flatnonzero(mask)

    box_index = np.empty(len(site_index), dtype=np.int64)
    params = np.empty((len(site_index), 6))
    thetas = np.empty(len(site_index))
    for j, s in enumerate(site_index):
        owners = np.flatnonzero(containment[:, s])
        if len(owners) == 0:
            raise ValueError(f"Site {s} at {sites[s]} is masked for regression but lies in no box")
        dist = [np.linalg.norm(sites[s] - boxes[b].center[:dims]) for b in owners]
        owner = int(owners[int(np.argmin(dist))])
        box_index[j] = owner
        params[j] = _encode_params(boxes[owner], sites[s])
        thetas[j] = boxes[owner].theta

    bins, residuals = encode_heading(thetas, num_bins) if len(thetas) else (np.zeros(0, np.int64), np.zeros(0))
    return RegressionTargets(site_index, box_index, params, bins, residuals, thetas, sites[site_index], num_bins)


def detection_targets(sites: HeadSites, boxes: Sequence[Box7],
                      config: DetectorConfig) -> Tuple[HeatmapTarget, RegressionTargets]:
    """Heatmap and regression targets with the detector's sigma, delta1 and heatmap variant."""
    heat = compute_heatmap(sites.positions, boxes, config.sigma, config.delta1, config.heatmap_normalized)
    regression = encode_targets(sites.positions, boxes, config.num_heading_bins, heat.regression_mask)
    return heat, regression


def decode_box(params: np.ndarray, bin_index: int, residual: float, site: np.ndarray, num_bins: int) -> Box7:
    cz = params[2] if len(site) == 2 else site[2] + params[2]
    l, w, h = (max(float(v), MIN_BOX_DIM) for v in params[3:6])
    theta = decode_heading(int(bin_index), float(residual), num_bins)
    return Box7(site[0] + params[0], site[1] + params[1], cz, l, w, h, theta)


# -------------------------
# Losses
# -------------------------

def smooth_l1(x: np.ndarray, beta: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """Element-wise smooth-L1 value and derivative."""
    x = np.asarray(x, dtype=np.float64)
    small = np.abs(x) < beta
    value = np.where(small, 0.5 * x ** 2 / beta, np.abs(x) - 0.5 * beta)
    grad = np.where(small, x / beta, np.sign(x))
    return value, grad


def loss_heatmap(pred_logits: np.ndarray, target, alpha: float = 2.0, beta: float = 4.0,
                 eps: float = 1e-3) -> Tuple[float, np.ndarray]:
    """Penalty-reduced focal loss normalized by the number of peak sites."""
    x = np.asarray(pred_logits, dtype=np.float64)
    h = np.asarray(target.heatmap if isinstance(target, HeatmapTarget) else target, dtype=np.float64)
    if x.shape != h.shape:
        raise ValueError(f"Logit shape {x.shape} != heatmap shape {h.shape}")
    positive = h > 1.0 - eps
    n = int(positive.sum())
    if n == 0:
        raise ValueError("loss_heatmap: no site has h > 1 - eps")

    p = expit(x)
    log_p = log_expit(x)
    log_q = log_expit(-x)
    pos_term = (1.0 - p) ** alpha * log_p
    neg_term = (1.0 - h) ** beta * p ** alpha * log_q
    loss = -float(pos_term[positive].sum() + neg_term[~positive].sum()) / n

    pos_grad = -(1.0 - p) ** alpha * ((1.0 - p) - alpha * p * log_p)
    neg_grad = -(1.0 - h) ** beta * p ** alpha * (alpha * (1.0 - p) * log_q - p)
    return loss, np.where(positive, pos_grad, neg_grad) / n


def loss_bin_heading(bin_logits: np.ndarray, residuals: np.ndarray, target_theta: np.ndarray,
                     num_bins: int) -> Tuple[float, np.ndarray, np.ndarray]:
    """Cross-entropy over heading bins plus smooth-L1 on the true bin's residual, averaged."""
    if num_bins < 2:
        raise ValueError(f"num_bins must be at least 2, got {num_bins}")
    logits = np.asarray(bin_logits, dtype=np.float64)
    residuals = np.asarray(residuals, dtype=np.float64)
    m = logits.shape[0]
    if m == 0:
        raise ValueError("loss_bin_heading needs at least one site")
    if logits.shape != (m, num_bins) or residuals.shape != (m, num_bins):
        raise ValueError(f"Expected ({m}, {num_bins}) logits and residuals, got {logits.shape}, {residuals.shape}")

    bins, target_res = encode_heading(target_theta, num_bins)
    rows = np.arange(m)
    ce = -log_softmax(logits, axis=1)[rows, bins]
    res_loss, res_grad = smooth_l1(residuals[rows, bins] - target_res)
    loss = float((ce + res_loss).sum() / m)

    grad_logits = softmax(logits, axis=1)
    grad_logits[rows, bins] -= 1.0
    grad_residuals = np.zeros_like(residuals)
    grad_residuals[rows, bins] = res_grad
    return loss, grad_logits / m, grad_residuals / m


def loss_box(preds: HeadOutput, targets: RegressionTargets, mask: np.ndarray,
             iou_kind: IouLossKind = IouLossKind.PLAIN) -> Tuple[float, HeadGradients]:
    """
    Mean over masked sites of smooth-L1 on (dx, dy, dz, l, w, h), the bin
    heading loss and the IoU loss. The IoU term contributes no gradient.
    """
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        raise ValueError("loss_box needs a non-empty regression mask")
    if not np.array_equal(idx, targets.site_index):
        raise ValueError("Regression targets are not aligned with the mask")
    m = len(idx)

    l1, l1_grad = smooth_l1(preds.box_params[idx] - targets.params)
    bin_loss, bin_grad, res_grad = loss_bin_heading(
        preds.bin_logits[idx], preds.bin_residuals[idx], targets.thetas, targets.num_bins
    )

    iou_terms = []
    for j, s in enumerate(idx):
        pred_bin = int(np.argmax(preds.bin_logits[s]))
        pred_box = decode_box(preds.box_params[s], pred_bin, preds.bin_residuals[s, pred_bin],
                              targets.site_positions[j], targets.num_bins)
        true_box = decode_box(targets.params[j], targets.bins[j], targets.residuals[j],
                              targets.site_positions[j], targets.num_bins)
        iou_terms.append(iou_loss(pred_box, true_box, iou_kind))

    loss = float(l1.sum() / m) + bin_loss + float(np.mean(iou_terms))

    grads = HeadGradients(
        box_params=_scatter_rows(l1_grad / m, idx, preds.box_params.shape),
        bin_logits=_scatter_rows(bin_grad, idx, preds.bin_logits.shape),
        bin_residuals=_scatter_rows(res_grad, idx, preds.bin_residuals.shape),
    )
    return loss, grads


def _scatter_rows(values: np.ndarray, idx: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    out = np.zeros(shape)
    out[idx] = values
    return out


def loss_total(seg: float, hm: float, box: float, lambda1: float = 400.0, lambda2: float = 4.0) -> float:
    values = (seg, hm, box)
    if not all(math.isfinite(v) for v in values):
        raise ValueError(f"Loss components must be finite, got {values}")
    return lambda1 * seg + lambda2 * hm + box


# -------------------------
# Decoding
# -------------------------

def local_maxima(sites: HeadSites, scores: np.ndarray, threshold: float) -> np.ndarray:
    """
    Indices of candidate sites (score > threshold) equal to their submanifold
    3x3(x3) neighborhood max. On exact ties a site yields to a lexicographically
    smaller neighbor only when that neighbor is kept itself.
    """
    candidates = np.flatnonzero(scores > threshold)
    if len(candidates) == 0:
        return candidates
    tensor = SparseTensor(sites.dims, sites.coords[candidates], scores[candidates][:, None])
    # candidate coords arrive sorted, so tensor rows line up with `candidates`
    values = tensor.features[:, 0]
    pooled = sparse_max_pool(tensor, 3).features[:, 0]
    keep = values == pooled

    smaller_ties: List[List[int]] = [[] for _ in range(len(values))]
    for in_idx, out_idx in build_rulebook_ssc(tensor, 3).pairs:
        tie = (in_idx < out_idx) & keep[in_idx] & keep[out_idx] & (values[in_idx] == values[out_idx])
        for i, o in zip(in_idx[tie], out_idx[tie]):
            smaller_ties[o].append(int(i))
    # rows are in lexicographic order, so every smaller tie is settled first
    for o, ties in enumerate(smaller_ties):
        if keep[o] and any(keep[i] for i in ties):
            keep[o] = False
    return candidates[keep]


def decode(head: HeadOutput, sites: HeadSites, config: DetectorConfig) -> List[Detection]:
    if len(head) != len(sites):
        raise ValueError(f"Head has {len(head)} rows but there are {len(sites)} sites")
    scores = expit(head.heatmap_logits)
    detections = []
    for s in local_maxima(sites, scores, config.delta2):
        bin_index = int(np.argmax(head.bin_logits[s]))
        box = decode_box(head.box_params[s], bin_index, head.bin_residuals[s, bin_index],
                         sites.positions[s], head.num_bins)
        detections.append(Detection(box=box, score=float(scores[s]), class_id=config.class_id))
    detections.sort(key=lambda d: -d.score)
    return detections


def plant_head_output(sites: HeadSites, boxes: Sequence[Box7], config: DetectorConfig,
                      peak_logit: float = 8.0, margin: float = 0.0) -> HeadOutput:
    """
    Head output built from ground truth: a peak logit at the site nearest
    each box center carrying that box's encoded targets, -peak_logit elsewhere.

    Sites count for a box when they fall inside it grown by ``margin`` on
    every side; site centers of a box's own points lie within half a site
    diagonal of the box.
    """
    n, bins = len(sites), config.num_heading_bins
    logits = np.full(n, -peak_logit)
    params = np.tile(np.array([0.0, 0.0, 0.0, 1.0, 1.0, 1.0]), (n, 1))
    bin_logits = np.full((n, bins), -peak_logit)
    residuals = np.zeros((n, bins))
    if n == 0:
        return HeadOutput(logits, params, bin_logits, residuals)

    bev = sites.pillar
    for i, box in enumerate(boxes):
        grown = Box7(box.cx, box.cy, box.cz, box.l + 2 * margin, box.w + 2 * margin,
                     box.h + 2 * margin, box.theta)
        inside = np.flatnonzero(points_in_box(sites.positions, grown, bev_only=bev))
        if len(inside) == 0:
            logger.debug("plant: box %d has no site", i)
            continue
        dist = np.linalg.norm(sites.positions[inside] - box.center[:sites.dims], axis=1)
        s = int(inside[int(np.argmin(dist))])
        bin_index, residual = encode_heading(box.theta, bins)
        logits[s] = peak_logit
        params[s] = _encode_params(box, sites.positions[s])
        bin_logits[s, bin_index[0]] = peak_logit
        residuals[s, bin_index[0]] = residual[0]
    return HeadOutput(logits, params, bin_logits, residuals)
