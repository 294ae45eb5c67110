# rsn/core.py
"""
Geometric primitives, oriented boxes, dense tensors, detector configuration
and the seeded random stream shared by every other module.

Points travel as float arrays of shape (N, 3) or wider; columns beyond the
first three (intensity, elongation, ...) are carried along untouched by the
rigid transforms.
"""
from __future__ import annotations

from dataclasses import dataclass
import math
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

TWO_PI = 2.0 * math.pi

VEHICLE_CLASS_ID = 1
PEDESTRIAN_CLASS_ID = 2
CLASS_NAMES = {VEHICLE_CLASS_ID: "vehicle", PEDESTRIAN_CLASS_ID: "pedestrian"}


# -------------------------
# Angles
# -------------------------

def wrap_angle(theta: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    theta = float(theta)
    if not math.isfinite(theta):
        raise ValueError(f"Cannot wrap non-finite angle: {theta}")
    if -math.pi <= theta < math.pi:
        return theta
    wrapped = (theta + math.pi) % TWO_PI - math.pi
    # float modulo can round up to exactly 2*pi for tiny negative inputs
    if wrapped >= math.pi:
        wrapped -= TWO_PI
    return wrapped


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorized wrap_angle."""
    theta = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        raise ValueError("Cannot wrap non-finite angles")
    wrapped = np.mod(theta + math.pi, TWO_PI) - math.pi
    wrapped = np.where(wrapped >= math.pi, wrapped - TWO_PI, wrapped)
    return np.where((theta >= -math.pi) & (theta < math.pi), theta, wrapped)


# -------------------------
# Value types
# -------------------------

@dataclass(frozen=True)
class Point3:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise ValueError(f"Point3 coordinates must be finite: {(self.x, self.y, self.z)}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


@dataclass(frozen=True)
class Box7:
    """Oriented 3D box: absolute center, dimensions and yaw."""
    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    theta: float = 0.0

    def __post_init__(self):
        values = (self.cx, self.cy, self.cz, self.l, self.w, self.h, self.theta)
        if not all(math.isfinite(float(v)) for v in values):
            raise ValueError(f"Box7 fields must be finite: {values}")
        if self.l <= 0 or self.w <= 0 or self.h <= 0:
            raise ValueError(f"Box7 dimensions must be positive: l={self.l}, w={self.w}, h={self.h}")
        for name in ("cx", "cy", "cz", "l", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Box7":
        if len(values) != 7:
            raise ValueError(f"Box7 needs 7 values, got {len(values)}")
        return cls(*(float(v) for v in values))

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.l, self.w, self.h, self.theta], dtype=np.float64)

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz], dtype=np.float64)

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    @property
    def z_min(self) -> float:
        return self.cz - 0.5 * self.h

    @property
    def z_max(self) -> float:
        return self.cz + 0.5 * self.h


@dataclass(frozen=True)
class Detection:
    box: Box7
    score: float
    class_id: int = VEHICLE_CLASS_ID

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"Detection score must lie in [0, 1], got {self.score}")
        object.__setattr__(self, "score", float(self.score))
        object.__setattr__(self, "class_id", int(self.class_id))

    def to_dict(self) -> Dict[str, Any]:
        b = self.box
        return {
            "cx": b.cx, "cy": b.cy, "cz": b.cz,
            "l": b.l, "w": b.w, "h": b.h,
            "theta": b.theta,
            "score": self.score,
            "class_id": self.class_id,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Detection":
        box = Box7(data["cx"], data["cy"], data["cz"], data["l"], data["w"], data["h"], data["theta"])
        return cls(box=box, score=float(data["score"]), class_id=int(data.get("class_id", VEHICLE_CLASS_ID)))


@dataclass(frozen=True)
class DenseTensor:
    """Row-major dense tensor of shape (H, W, C) or (H, W, D, C)."""
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim not in (3, 4):
            raise ValueError(f"DenseTensor must be 3D or 4D, got shape {data.shape}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[-1]


# -------------------------
# Configuration
# -------------------------

Extent = Tuple[float, float]


class DetectorConfig(BaseModel):
    """Every named detector constant, with vehicle defaults."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    class_name: str = "vehicle"
    class_id: int = Field(VEHICLE_CLASS_ID, ge=0, le=255)
    gamma: float = 0.15
    lambda1: float = 400.0
    lambda2: float = 4.0
    sigma: float = 1.0
    delta1: float = 0.2
    delta2: float = 0.2
    alpha: float = 2.0
    beta: float = 4.0
    eps: float = 1e-3
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    num_heading_bins: int = 12
    voxel_size: Tuple[float, float, float] = (0.2, 0.2, math.inf)
    region: Tuple[Extent, Extent, Extent] = ((-79.5, 79.5), (-79.5, 79.5), (-5.0, 5.0))
    norm_caps: Tuple[float, float, float] = (79.5, 2.0, 2.0)
    iou_threshold: float = 0.7
    heatmap_normalized: bool = True

    @field_validator("gamma", "delta1", "delta2", "focal_alpha")
    @classmethod
    def _open_unit_interval(cls, v: float, info) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError(f"{info.field_name} must lie in (0, 1), got {v}")
        return v

    @field_validator("sigma", "eps", "lambda1", "lambda2")
    @classmethod
    def _positive(cls, v: float, info) -> float:
        if not v > 0:
            raise ValueError(f"{info.field_name} must be positive, got {v}")
        return v

    @field_validator("num_heading_bins")
    @classmethod
    def _bins(cls, v: int) -> int:
        if v < 2:
            raise ValueError(f"num_heading_bins must be at least 2, got {v}")
        return v

    @field_validator("voxel_size")
    @classmethod
    def _voxel_size(cls, v: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if not all(s > 0 for s in v):
            raise ValueError(f"voxel sizes must be positive, got {v}")
        if not (math.isfinite(v[0]) and math.isfinite(v[1])):
            raise ValueError(f"only the z voxel size may be infinite, got {v}")
        return v

    @field_validator("region")
    @classmethod
    def _region(cls, v):
        for lo, hi in v:
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValueError(f"region extents must be finite with lo < hi, got {v}")
        return v

    @field_validator("norm_caps")
    @classmethod
    def _caps(cls, v):
        if not all(c > 0 for c in v):
            raise ValueError(f"normalization caps must be positive, got {v}")
        return v

    @property
    def pillar(self) -> bool:
        return math.isinf(self.voxel_size[2])

    @classmethod
    def vehicle(cls, **overrides) -> "DetectorConfig":
        return cls(**overrides)

    @classmethod
    def pedestrian(cls, **overrides) -> "DetectorConfig":
        values = dict(
            class_name="pedestrian",
            class_id=PEDESTRIAN_CLASS_ID,
            gamma=0.1,
            sigma=0.5,
            num_heading_bins=4,
            voxel_size=(0.1, 0.1, math.inf),
            iou_threshold=0.5,
        )
        values.update(overrides)
        return cls(**values)


# -------------------------
# Seeded randomness
# -------------------------

class Rng:
    """
    Seeded stream on the counter-based Philox generator.

    Child streams are derived by key, so adding a consumer never shifts the
    numbers another consumer sees.
    """

    def __init__(self, seed: int, key: Tuple[int, ...] = ()):
        seed = int(seed)
        if not 0 <= seed < 2 ** 64:
            raise ValueError(f"Rng seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self.key = tuple(int(k) for k in key)
        sequence = np.random.SeedSequence(entropy=seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(sequence))

    def child(self, *key: int) -> "Rng":
        return Rng(self.seed, self.key + tuple(key))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self.key})"


# -------------------------
# Box geometry
# -------------------------

def box_corners_bev(box: Box7) -> np.ndarray:
    """Return the 4 BEV corners (counter-clockwise) as a (4, 2) array."""
    half_l, half_w = 0.5 * box.l, 0.5 * box.w
    local = np.array([[half_l, half_w], [-half_l, half_w], [-half_l, -half_w], [half_l, -half_w]])
    c, s = math.cos(box.theta), math.sin(box.theta)
    rotation = np.array([[c, -s], [s, c]])
    return local @ rotation.T + np.array([box.cx, box.cy])


def points_to_box_frame(points: np.ndarray, box: Box7) -> np.ndarray:
    """Express (N, >=3) points in the box frame, returning (N, 3)."""
    pts = np.asarray(points, dtype=np.float64)[:, :3]
    dx = pts[:, 0] - box.cx
    dy = pts[:, 1] - box.cy
    c, s = math.cos(box.theta), math.sin(box.theta)
    local = np.empty((pts.shape[0], 3))
    local[:, 0] = c * dx + s * dy
    local[:, 1] = -s * dx + c * dy
    local[:, 2] = pts[:, 2] - box.cz
    return local


def points_in_box(points: np.ndarray, box: Box7, bev_only: bool = False) -> np.ndarray:
    """Boundary-inclusive containment mask for (N, >=2) points."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    if pts.shape[1] == 2:
        pts = np.column_stack([pts, np.full(pts.shape[0], box.cz)])
    local = points_to_box_frame(pts, box)
    inside = (np.abs(local[:, 0]) <= 0.5 * box.l) & (np.abs(local[:, 1]) <= 0.5 * box.w)
    if not bev_only:
        inside &= np.abs(local[:, 2]) <= 0.5 * box.h
    return inside


def point_in_box(p: Point3, box: Box7) -> bool:
    return bool(points_in_box(p.as_array()[None, :], box)[0])


# -------------------------
# Rigid transforms
# -------------------------

@dataclass(frozen=True)
class RigidTransform:
    """
    Mirror (y -> -y) if ``flip``, then rotate by ``yaw`` about Z, then translate.
    """
    yaw: float = 0.0
    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    flip: bool = False

    def __post_init__(self):
        object.__setattr__(self, "yaw", float(self.yaw))
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))
        if len(self.translation) != 3:
            raise ValueError(f"translation must have 3 components, got {self.translation}")

    @property
    def linear(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rotation = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        if self.flip:
            rotation = rotation @ np.diag([1.0, -1.0, 1.0])
        return rotation

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.linear
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        flip = bool(np.linalg.det(m[:2, :2]) < 0)
        planar = m[:2, :2] @ np.diag([1.0, -1.0]) if flip else m[:2, :2]
        yaw = math.atan2(planar[1, 0], planar[0, 0])
        return cls(yaw=yaw, translation=tuple(m[:3, 3]), flip=flip)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform applying ``other`` first, then ``self``."""
        return RigidTransform.from_matrix(self.matrix @ other.matrix)

    def inverse(self) -> "RigidTransform":
        linear_inv = self.linear.T
        m = np.eye(4)
        m[:3, :3] = linear_inv
        m[:3, 3] = -linear_inv @ np.asarray(self.translation)
        return RigidTransform.from_matrix(m)

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        pts = np.array(points, dtype=np.float64, copy=True)
        if pts.shape[0] == 0:
            return pts
        pts[:, :3] = pts[:, :3] @ self.linear.T + np.asarray(self.translation)
        return pts

    def apply_heading(self, theta: float) -> float:
        return wrap_angle(self.yaw + (-theta if self.flip else theta))

    def apply_box(self, box: Box7) -> Box7:
        center = self.apply_points(box.center[None, :])[0]
        return Box7(center[0], center[1], center[2], box.l, box.w, box.h, self.apply_heading(box.theta))

    def apply_boxes(self, boxes: Sequence[Box7]) -> List[Box7]:
        return [self.apply_box(b) for b in boxes]

    def apply_detections(self, detections: Sequence[Detection]) -> List[Detection]:
        return [Detection(self.apply_box(d.box), d.score, d.class_id) for d in detections]


IDENTITY = RigidTransform()


def transform_flip_x(points: np.ndarray, boxes: Sequence[Box7]) -> Tuple[np.ndarray, List[Box7]]:
    """Flip along the X axis (y -> -y); headings negate."""
    flip = RigidTransform(flip=True)
    return flip.apply_points(points), flip.apply_boxes(boxes)


def transform_rotate_z(points: np.ndarray, boxes: Sequence[Box7], angle: float) -> Tuple[np.ndarray, List[Box7]]:
    rotation = RigidTransform(yaw=angle)
    return rotation.apply_points(points), rotation.apply_boxes(boxes)


def augment_scene(
    points: np.ndarray,
    boxes: Sequence[Box7],
    rng: Rng,
    flip_probability: float = 0.5,
    max_rotation: float = math.pi / 4,
) -> Tuple[np.ndarray, List[Box7], RigidTransform]:
    """Random X-axis flip followed by a global Z rotation in [-max_rotation, max_rotation]."""
    flip = bool(rng.random() < flip_probability)
    angle = float(rng.uniform(-max_rotation, max_rotation))
    transform = RigidTransform(yaw=angle).compose(RigidTransform(flip=flip))
    return transform.apply_points(points), transform.apply_boxes(boxes), transform
