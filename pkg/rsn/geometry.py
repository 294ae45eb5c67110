# rsn/geometry.py
"""
Rotated-box overlap: convex polygon clipping (Sutherland-Hodgman), BEV and
3D IoU, and the IoU loss used by the head, the evaluator and the ensembler.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.spatial import ConvexHull

from .core import Box7, box_corners_bev

# Vertices closer than this are merged; intersections below this area are empty.
GEOMETRY_EPS = 1e-12


def polygon_area(vertices: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise order)."""
    if len(vertices) < 3:
        return 0.0
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


@dataclass(frozen=True)
class ConvexPolygon:
    vertices: np.ndarray

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 2)
        kept = []
        for v in verts:
            if kept and np.max(np.abs(v - kept[-1])) <= GEOMETRY_EPS:
                continue
            kept.append(v)
        if len(kept) > 1 and np.max(np.abs(kept[0] - kept[-1])) <= GEOMETRY_EPS:
            kept.pop()
        verts = np.array(kept) if len(kept) >= 3 else np.zeros((0, 2))
        verts.setflags(write=False)
        object.__setattr__(self, "vertices", verts)

    @classmethod
    def empty(cls) -> "ConvexPolygon":
        return cls(np.zeros((0, 2)))

    @classmethod
    def from_box(cls, box: Box7) -> "ConvexPolygon":
        return cls(box_corners_bev(box))

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) == 0

    @property
    def area(self) -> float:
        return abs(polygon_area(self.vertices))

    def __len__(self) -> int:
        return len(self.vertices)


def _cross(o: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return float((a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]))


def _line_intersection(s: np.ndarray, e: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = b - a
    denom = d[0] * (e[1] - s[1]) - d[1] * (e[0] - s[0])
    if abs(denom) < GEOMETRY_EPS:
        return e
    t = (d[0] * (s[1] - a[1]) - d[1] * (s[0] - a[0])) / -denom
    return s + t * (e - s)


def clip_convex(subject: ConvexPolygon, clip: ConvexPolygon) -> ConvexPolygon:
    """Intersect two counter-clockwise convex polygons."""
    if subject.is_empty or clip.is_empty:
        return ConvexPolygon.empty()

    output = list(subject.vertices)
    clip_verts = clip.vertices
    for i in range(len(clip_verts)):
        a, b = clip_verts[i], clip_verts[(i + 1) % len(clip_verts)]
        tol = GEOMETRY_EPS * max(1.0, float(np.hypot(*(b - a))))
        candidates, output = output, []
        if not candidates:
            break
        s = candidates[-1]
        s_inside = _cross(a, b, s) >= -tol
        for e in candidates:
            e_inside = _cross(a, b, e) >= -tol
            if e_inside:
                if not s_inside:
                    output.append(_line_intersection(s, e, a, b))
                output.append(e)
            elif s_inside:
                output.append(_line_intersection(s, e, a, b))
            s, s_inside = e, e_inside

    result = ConvexPolygon(np.array(output) if output else np.zeros((0, 2)))
    if result.area < GEOMETRY_EPS:
        return ConvexPolygon.empty()
    return result


def bev_intersection_area(a: Box7, b: Box7) -> float:
    return clip_convex(ConvexPolygon.from_box(a), ConvexPolygon.from_box(b)).area


def z_overlap(a: Box7, b: Box7) -> float:
    return max(0.0, min(a.z_max, b.z_max) - max(a.z_min, b.z_min))


def iou_bev(a: Box7, b: Box7) -> float:
    inter = bev_intersection_area(a, b)
    union = a.l * a.w + b.l * b.w - inter
    if union <= 0:
        return 0.0
    return float(min(1.0, max(0.0, inter / union)))


def iou_3d(a: Box7, b: Box7) -> float:
    inter = bev_intersection_area(a, b) * z_overlap(a, b)
    union = a.volume + b.volume - inter
    if union <= 0:
        return 0.0
    return float(min(1.0, max(0.0, inter / union)))


def giou_3d(a: Box7, b: Box7) -> float:
    """Generalized IoU with a BEV convex-hull x z-extent enclosure."""
    inter = bev_intersection_area(a, b) * z_overlap(a, b)
    union = a.volume + b.volume - inter
    hull = ConvexHull(np.vstack([box_corners_bev(a), box_corners_bev(b)]))
    z_range = max(a.z_max, b.z_max) - min(a.z_min, b.z_min)
    enclosure = hull.volume * z_range
    return float(inter / union - (enclosure - union) / enclosure)


class IouLossKind(str, Enum):
    PLAIN = "iou"
    GIOU = "giou"


def iou_loss(pred: Box7, target: Box7, kind: IouLossKind = IouLossKind.PLAIN) -> float:
    if IouLossKind(kind) is IouLossKind.GIOU:
        return 1.0 - giou_3d(pred, target)
    return 1.0 - iou_3d(pred, target)


def iou_matrix(boxes_a: Sequence[Box7], boxes_b: Sequence[Box7], mode: str = "3D") -> np.ndarray:
    """Pairwise IoU, mode 'BEV' or '3D'."""
    fn = iou_function(mode)
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = fn(a, b)
    return out


def iou_function(mode: str):
    key = str(mode).upper()
    if key == "BEV":
        return iou_bev
    if key == "3D":
        return iou_3d
    raise ValueError(f"Unknown IoU mode: {mode!r} (expected 'BEV' or '3D')")
