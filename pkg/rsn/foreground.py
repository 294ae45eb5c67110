# rsn/foreground.py
"""
Foreground segmentation: the focal loss on range-image logits, score
thresholding and gathering of the selected pixels as 3D points carrying
their learned range features.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.special import expit, log_expit

from .core import Point3
from .errors import UndefinedMetricError
from .range_image import RangeImage, unproject
from .rife import RifeOutput


@dataclass(frozen=True)
class ForegroundPoint:
    position: Point3
    range_feature: np.ndarray
    source_pixel: Tuple[int, int]
    frame_index: int
    score: float


@dataclass(frozen=True)
class ForegroundPoints:
    """Column-wise batch of selected foreground points, in (frame, row, col) order."""
    positions: np.ndarray
    features: np.ndarray
    pixels: np.ndarray
    frame_index: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        n = len(self.positions)
        for name in ("features", "pixels", "frame_index", "scores"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"ForegroundPoints column {name!r} has {len(getattr(self, name))} rows, expected {n}")
        if np.any(self.frame_index < 0):
            raise ValueError("frame_index must be non-negative")

    @classmethod
    def empty(cls, feature_width: int) -> "ForegroundPoints":
        return cls(
            positions=np.zeros((0, 3)),
            features=np.zeros((0, feature_width)),
            pixels=np.zeros((0, 2), dtype=np.int64),
            frame_index=np.zeros(0, dtype=np.int64),
            scores=np.zeros(0),
        )

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> ForegroundPoint:
        p = self.positions[i]
        return ForegroundPoint(
            position=Point3(float(p[0]), float(p[1]), float(p[2])),
            range_feature=self.features[i],
            source_pixel=(int(self.pixels[i, 0]), int(self.pixels[i, 1])),
            frame_index=int(self.frame_index[i]),
            score=float(self.scores[i]),
        )

    @property
    def feature_width(self) -> int:
        return self.features.shape[1]

    def with_positions(self, positions: np.ndarray) -> "ForegroundPoints":
        return ForegroundPoints(positions, self.features, self.pixels, self.frame_index, self.scores)

    def with_frame_index(self, frame_index: int) -> "ForegroundPoints":
        return ForegroundPoints(
            self.positions, self.features, self.pixels,
            np.full(len(self), frame_index, dtype=np.int64), self.scores,
        )


def focal_loss_seg(
    logits: np.ndarray,
    labels: np.ndarray,
    valid: np.ndarray,
    focal_gamma: float = 2.0,
    focal_alpha: float = 0.25,
) -> Tuple[float, np.ndarray]:
    """
    Alpha-balanced sigmoid focal loss averaged over valid pixels.

    Returns the loss and its gradient with respect to the logits (zero on
    invalid pixels).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if logits.shape != labels.shape or logits.shape != valid.shape:
        raise ValueError(f"Shapes disagree: logits {logits.shape}, labels {labels.shape}, valid {valid.shape}")
    count = int(valid.sum())
    if count == 0:
        raise ValueError("focal_loss_seg needs at least one valid pixel")

    p = expit(logits)
    log_p = log_expit(logits)
    log_q = log_expit(-logits)
    g = focal_gamma

    pos_loss = -focal_alpha * (1.0 - p) ** g * log_p
    neg_loss = -(1.0 - focal_alpha) * p ** g * log_q
    pos_grad = focal_alpha * (1.0 - p) ** g * (g * p * log_p - (1.0 - p))
    neg_grad = (1.0 - focal_alpha) * p ** g * (p - g * (1.0 - p) * log_q)

    per_pixel = np.where(labels, pos_loss, neg_loss)
    grad = np.where(labels, pos_grad, neg_grad)
    loss = float(per_pixel[valid].sum() / count)
    grad = np.where(valid, grad / count, 0.0)
    return loss, grad


def select_foreground(rife: RifeOutput, image: RangeImage, gamma: float, frame_index: int = 0) -> ForegroundPoints:
    """Valid pixels whose sigmoid score is strictly above gamma, in (row, col) order."""
    if rife.seg_logits.shape != image.range.shape:
        raise ValueError(f"Segmentation shape {rife.seg_logits.shape} != image shape {image.range.shape}")
    scores = expit(rife.seg_logits)
    mask = image.valid & (scores > gamma)
    pixels, points = unproject(image)
    keep = mask[pixels[:, 0], pixels[:, 1]]
    pixels, points = pixels[keep], points[keep]
    return ForegroundPoints(
        positions=points,
        features=rife.features[pixels[:, 0], pixels[:, 1]],
        pixels=pixels,
        frame_index=np.full(len(points), frame_index, dtype=np.int64),
        scores=scores[pixels[:, 0], pixels[:, 1]],
    )


def selection_mask(points: ForegroundPoints, shape: Tuple[int, int]) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    mask[points.pixels[:, 0], points.pixels[:, 1]] = True
    return mask


def recall_precision(selected: np.ndarray, labels: np.ndarray) -> Tuple[float, Optional[float]]:
    """
    Per-pixel recall and precision of a selection mask against labels.

    Precision is None for an empty selection.
    """
    selected = np.asarray(selected, dtype=bool)
    labels = np.asarray(labels, dtype=bool)
    if selected.shape != labels.shape:
        raise ValueError(f"Selection shape {selected.shape} != label shape {labels.shape}")
    positives = int(labels.sum())
    if positives == 0:
        raise UndefinedMetricError("Recall is undefined without positive labels")
    hits = int((selected & labels).sum())
    n_selected = int(selected.sum())
    precision = hits / n_selected if n_selected else None
    return hits / positives, precision
