# rsn/synth.py
"""
Seeded synthetic LiDAR scenes: boxes on a ground plane, ray-cast against
the beam pattern of a range image so every point sits on a pixel ray.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import json
import logging
import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import (
    Box7,
    PEDESTRIAN_CLASS_ID,
    RigidTransform,
    Rng,
    VEHICLE_CLASS_ID,
    box_corners_bev,
    points_in_box,
    wrap_angle,
)
from .range_image import default_inclinations

logger = logging.getLogger(__name__)

GROUND_Z = -1.8
MIN_BOX_RANGE = 8.0
FRAME_INTERVAL = 0.1
# Gap kept between boxes so planted peaks of different boxes never touch.
BOX_CLEARANCE = 2.0
# Azimuthal margin between box silhouettes; no box occludes another.
AZIMUTH_MARGIN = 0.02
# Box returns sit this far behind the struck face (capped at half the chord).
SURFACE_DEPTH = 0.3
MANIFEST_NAME = "manifest.json"

# (l, w, h) sampling ranges per class
CLASS_DIMS = {
    VEHICLE_CLASS_ID: ((4.0, 5.0), (1.8, 2.1), (1.5, 1.8)),
    PEDESTRIAN_CLASS_ID: ((0.6, 1.0), (0.6, 1.0), (1.6, 1.9)),
}


@dataclass(frozen=True)
class Scene:
    """Points (N, 5) [x, y, z, intensity, elongation] and boxes in the sensor frame."""
    points: np.ndarray
    boxes: Tuple[Box7, ...]
    class_ids: np.ndarray
    pose: RigidTransform = field(default_factory=RigidTransform)
    timestamp: float = 0.0
    scene_id: str = "scene-0000"

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 5)
        class_ids = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)
        if len(class_ids) != len(self.boxes):
            raise ValueError(f"{len(self.boxes)} boxes but {len(class_ids)} class ids")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "class_ids", class_ids)

    def transformed(self, transform: RigidTransform) -> "Scene":
        """Same world seen through ``transform``; the pose keeps mapping sensor to world."""
        return Scene(
            points=transform.apply_points(self.points),
            boxes=tuple(transform.apply_boxes(self.boxes)),
            class_ids=self.class_ids,
            pose=self.pose.compose(transform.inverse()),
            timestamp=self.timestamp,
            scene_id=self.scene_id,
        )

    def boxes_of_class(self, class_id: int) -> List[Box7]:
        return [b for b, c in zip(self.boxes, self.class_ids) if c == class_id]


# -------------------------
# Sampling
# -------------------------

def _azimuth_span(box: Box7) -> Tuple[float, float]:
    center = math.atan2(box.cy, box.cx)
    offsets = [wrap_angle(math.atan2(y, x) - center) for x, y in box_corners_bev(box)]
    return center, max(abs(o) for o in offsets) + AZIMUTH_MARGIN


def _conflicts(box: Box7, placed: Sequence[Box7]) -> bool:
    center, half = _azimuth_span(box)
    radius = 0.5 * math.hypot(box.l, box.w)
    for other in placed:
        other_center, other_half = _azimuth_span(other)
        if abs(wrap_angle(center - other_center)) < half + other_half:
            return True
        gap = math.hypot(box.cx - other.cx, box.cy - other.cy) - radius - 0.5 * math.hypot(other.l, other.w)
        if gap < BOX_CLEARANCE:
            return True
    return False


def sample_boxes(rng: Rng, n_boxes: int, class_id: int = VEHICLE_CLASS_ID, max_range: float = 35.0,
                 ground_z: float = GROUND_Z, max_attempts: int = 200) -> List[Box7]:
    """Boxes resting on the ground with class-typical dims and disjoint silhouettes."""
    if n_boxes < 0:
        raise ValueError(f"n_boxes must be non-negative, got {n_boxes}")
    if class_id not in CLASS_DIMS:
        raise ValueError(f"No dimension prior for class {class_id}")
    if max_range <= MIN_BOX_RANGE:
        raise ValueError(f"max_range must exceed {MIN_BOX_RANGE} m, got {max_range}")
    (l_lo, l_hi), (w_lo, w_hi), (h_lo, h_hi) = CLASS_DIMS[class_id]

    boxes: List[Box7] = []
    for _ in range(n_boxes * max_attempts):
        if len(boxes) == n_boxes:
            break
        r = rng.uniform(MIN_BOX_RANGE, max_range)
        az = rng.uniform(-math.pi, math.pi)
        l, w, h = rng.uniform(l_lo, l_hi), rng.uniform(w_lo, w_hi), rng.uniform(h_lo, h_hi)
        theta = rng.uniform(-math.pi, math.pi)
        box = Box7(r * math.cos(az), r * math.sin(az), ground_z + 0.5 * h, l, w, h, theta)
        if not _conflicts(box, boxes):
            boxes.append(box)
    if len(boxes) < n_boxes:
        logger.warning("Placed only %d of %d boxes", len(boxes), n_boxes)
    return boxes


# -------------------------
# Ray casting
# -------------------------

def pixel_directions(inclinations: np.ndarray, width: int) -> np.ndarray:
    """Unit ray direction at every pixel center, shape (H, W, 3)."""
    azimuths = -math.pi + np.arange(width) * (2.0 * math.pi / width)
    cos_i = np.cos(inclinations)[:, None]
    return np.stack([
        cos_i * np.cos(azimuths)[None, :],
        cos_i * np.sin(azimuths)[None, :],
        np.broadcast_to(np.sin(inclinations)[:, None], (len(inclinations), width)),
    ], axis=-1)


def ray_box_hits(directions: np.ndarray, box: Box7) -> Tuple[np.ndarray, np.ndarray]:
    """Slab test of rays from the origin; returns (entry, exit) distances, inf where missed."""
    c, s = math.cos(box.theta), math.sin(box.theta)
    rotation_t = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    origin = -rotation_t @ box.center
    local = directions @ rotation_t.T
    half = np.array([0.5 * box.l, 0.5 * box.w, 0.5 * box.h])
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - origin) / local
        t2 = (half - origin) / local
    near = np.nanmax(np.minimum(t1, t2), axis=-1)
    far = np.nanmin(np.maximum(t1, t2), axis=-1)
    hit = (near <= far) & (near > 0)
    return np.where(hit, near, np.inf), np.where(hit, far, np.inf)


def cast_scene(boxes: Sequence[Box7], rng: Rng, n_bg_points: int, inclinations: np.ndarray, width: int,
               ground_z: float = GROUND_Z, max_range: float = 80.0) -> np.ndarray:
    """All box returns plus ``n_bg_points`` random ground returns, as (N, 5) points."""
    directions = pixel_directions(inclinations, width)
    shape = directions.shape[:2]
    box_t = np.full(shape, np.inf)
    chord = np.zeros(shape)
    for box in boxes:
        entry, exit_ = ray_box_hits(directions, box)
        closer = entry < box_t
        box_t = np.where(closer, entry, box_t)
        chord = np.where(closer, exit_ - entry, chord)

    with np.errstate(divide="ignore"):
        ground_t = np.where(directions[..., 2] < 0, ground_z / directions[..., 2], np.inf)
    ground_hit = (ground_t < box_t) & (ground_t <= max_range)
    box_hit = np.isfinite(box_t) & ~ground_hit & (chord > 1e-6)

    depth = box_t[box_hit] + np.minimum(SURFACE_DEPTH, 0.5 * chord[box_hit])
    box_points = directions[box_hit] * depth[:, None]

    ground_pixels = np.argwhere(ground_hit)
    n_bg = min(n_bg_points, len(ground_pixels))
    chosen = np.sort(rng.permutation(len(ground_pixels))[:n_bg])
    ground_pixels = ground_pixels[chosen]
    ground_points = directions[ground_pixels[:, 0], ground_pixels[:, 1]] * ground_t[
        ground_pixels[:, 0], ground_pixels[:, 1]][:, None]

    box_attrs = np.column_stack([rng.uniform(0.3, 1.0, len(box_points)), rng.uniform(0.0, 0.5, len(box_points))])
    ground_attrs = np.column_stack([rng.uniform(0.0, 0.3, n_bg), rng.uniform(0.0, 0.2, n_bg)])
    return np.concatenate([
        np.column_stack([box_points, box_attrs]).reshape(-1, 5),
        np.column_stack([ground_points, ground_attrs]).reshape(-1, 5),
    ])


def synth_scene(rng: Rng, n_boxes: int, n_bg_points: int, class_id: int = VEHICLE_CLASS_ID,
                max_range: float = 35.0, height: int = 64, width: int = 1024,
                inclinations: Optional[np.ndarray] = None, scene_id: str = "scene-0000") -> Scene:
    """
    Boxes in [8, max_range] m with non-overlapping silhouettes, their
    visible returns and ground clutter. Boxes that catch no ray are dropped.
    """
    incl = default_inclinations(height) if inclinations is None else np.asarray(inclinations, dtype=np.float64)
    boxes = sample_boxes(rng.child(0), n_boxes, class_id, max_range)
    points = cast_scene(boxes, rng.child(1), n_bg_points, incl, width)
    boxes = _visible(boxes, points)
    return Scene(points, tuple(boxes), np.full(len(boxes), class_id), scene_id=scene_id)


def _visible(boxes: Sequence[Box7], points: np.ndarray) -> List[Box7]:
    kept = []
    for i, box in enumerate(boxes):
        if points_in_box(points, box).any():
            kept.append(box)
        else:
            logger.debug("synth: box %d caught no ray and was dropped", i)
    return kept


def synth_sequence(rng: Rng, n_frames: int, n_boxes: int, n_bg_points: int,
                   class_id: int = VEHICLE_CLASS_ID, max_range: float = 35.0, height: int = 64,
                   width: int = 1024, speed: float = 5.0, sequence_id: str = "seq-0000") -> List[Scene]:
    """
    A static world seen by an ego vehicle driving along +x, in chronological
    order with frames FRAME_INTERVAL apart. Boxes are in each frame's sensor frame.
    """
    if n_frames < 1:
        raise ValueError(f"n_frames must be positive, got {n_frames}")
    incl = default_inclinations(height)
    world_boxes = sample_boxes(rng.child(0), n_boxes, class_id, max_range)
    frames = []
    for i in range(n_frames):
        pose = RigidTransform(translation=(speed * FRAME_INTERVAL * i, 0.0, 0.0))
        boxes = pose.inverse().apply_boxes(world_boxes)
        points = cast_scene(boxes, rng.child(1, i), n_bg_points, incl, width)
        frames.append(Scene(
            points, tuple(boxes), np.full(len(boxes), class_id), pose=pose,
            timestamp=round(FRAME_INTERVAL * i, 6), scene_id=f"{sequence_id}-{i:04d}",
        ))
    return frames


def split_sequences(scenes: Sequence[Scene]) -> List[List[Scene]]:
    """
    Chronological runs of scenes; a timestamp that does not increase starts
    a new sequence, so stand-alone scenes each form their own.
    """
    sequences: List[List[Scene]] = []
    for scene in scenes:
        if sequences and scene.timestamp > sequences[-1][-1].timestamp:
            sequences[-1].append(scene)
        else:
            sequences.append([scene])
    return sequences


# -------------------------
# Scene files
# -------------------------

def save_scene(path: Union[str, Path], scene: Scene) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        path,
        points=scene.points,
        boxes=np.array([b.as_array() for b in scene.boxes]).reshape(-1, 7),
        class_ids=scene.class_ids,
        pose=scene.pose.matrix,
        timestamp=np.array(scene.timestamp),
        scene_id=np.array(scene.scene_id),
    )
    return path


def load_scene(path: Union[str, Path]) -> Scene:
    with np.load(Path(path)) as data:
        return Scene(
            points=data["points"],
            boxes=tuple(Box7.from_array(row) for row in data["boxes"]),
            class_ids=data["class_ids"],
            pose=RigidTransform.from_matrix(data["pose"]),
            timestamp=float(data["timestamp"]),
            scene_id=str(data["scene_id"]),
        )


def save_scenes(directory: Union[str, Path], scenes: Sequence[Scene], metadata: Optional[dict] = None) -> Path:
    """One .npz per scene plus a manifest listing them in order."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for scene in scenes:
        name = f"{scene.scene_id}.npz"
        save_scene(directory / name, scene)
        entries.append({
            "scene_id": scene.scene_id,
            "file": name,
            "timestamp": scene.timestamp,
            "num_points": int(len(scene.points)),
            "num_boxes": len(scene.boxes),
        })
    manifest = {"metadata": metadata or {}, "scenes": entries}
    manifest_path = directory / MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path


def load_scenes(directory: Union[str, Path]) -> List[Scene]:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"No {MANIFEST_NAME} in {directory}")
    manifest = json.loads(manifest_path.read_text())
    return [load_scene(directory / entry["file"]) for entry in manifest["scenes"]]
