# rsn/voxelizer.py
"""
Dynamic voxelization of selected foreground points, per-point feature
augmentation, the per-voxel PointNet with layer normalization, and
temporal multi-frame merging.
"""
from __future__ import annotations

from dataclasses import dataclass
import logging
import math
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .core import DetectorConfig, RigidTransform
from .foreground import ForegroundPoints

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-6
DEFAULT_FRAME_INTERVAL = 0.1


@dataclass(frozen=True)
class VoxelGrid:
    voxel_size: Tuple[float, float, float]
    region: Tuple[Tuple[float, float], Tuple[float, float], Tuple[float, float]]

    def __post_init__(self):
        size = tuple(float(s) for s in self.voxel_size)
        region = tuple((float(lo), float(hi)) for lo, hi in self.region)
        if len(size) != 3 or len(region) != 3:
            raise ValueError("VoxelGrid needs 3 voxel sizes and 3 region extents")
        if not all(s > 0 for s in size) or math.isinf(size[0]) or math.isinf(size[1]):
            raise ValueError(f"Invalid voxel size {size}")
        for axis, ((lo, hi), s) in enumerate(zip(region, size)):
            if not lo < hi:
                raise ValueError(f"Region axis {axis} is empty: {(lo, hi)}")
            if math.isinf(s):
                continue
            cells = (hi - lo) / s
            if abs(cells - round(cells)) > 1e-6:
                raise ValueError(f"Region axis {axis} extent {hi - lo} is not a whole number of {s} m voxels")
        object.__setattr__(self, "voxel_size", size)
        object.__setattr__(self, "region", region)

    @classmethod
    def from_config(cls, config: DetectorConfig) -> "VoxelGrid":
        return cls(config.voxel_size, config.region)

    @property
    def pillar(self) -> bool:
        return math.isinf(self.voxel_size[2])

    @property
    def dims(self) -> int:
        return 2 if self.pillar else 3

    @property
    def region_min(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.region])

    @property
    def region_max(self) -> np.ndarray:
        return np.array([hi for _, hi in self.region])

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(
            int(round((hi - lo) / s)) for (lo, hi), s in zip(self.region[:self.dims], self.voxel_size[:self.dims])
        )

    def voxel_centers(self, coords: np.ndarray, stride_level: int = 1) -> np.ndarray:
        """
        Metric centers (N, 3) of voxels at the given stride level.

        A strided site ``o`` sits on the fine voxel ``stride_level * o`` its
        kernel is anchored on, the middle of its receptive field.
        """
        coords = np.asarray(coords, dtype=np.float64).reshape(-1, self.dims)
        size = np.array(self.voxel_size[:self.dims])
        centers = np.empty((coords.shape[0], 3))
        centers[:, :self.dims] = self.region_min[:self.dims] + (coords * stride_level + 0.5) * size
        if self.pillar:
            centers[:, 2] = 0.5 * (self.region[2][0] + self.region[2][1])
        return centers

    def site_positions(self, coords: np.ndarray, stride_level: int = 1) -> np.ndarray:
        """Metric site coordinates, (N, 2) in pillar mode and (N, 3) otherwise."""
        return self.voxel_centers(coords, stride_level)[:, :self.dims]


@dataclass(frozen=True)
class VoxelAssignment:
    """Dynamic voxel map: unique coords in lexicographic order plus per-point voxel ids."""
    coords: np.ndarray
    point_index: np.ndarray
    voxel_index: np.ndarray

    @property
    def num_voxels(self) -> int:
        return len(self.coords)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.voxel_index, minlength=self.num_voxels)

    def as_dict(self) -> Dict[Tuple[int, ...], List[int]]:
        mapping: Dict[Tuple[int, ...], List[int]] = {tuple(int(c) for c in coord): [] for coord in self.coords}
        keys = list(mapping)
        for point, voxel in zip(self.point_index.tolist(), self.voxel_index.tolist()):
            mapping[keys[voxel]].append(point)
        return mapping


def voxelize_dynamic(points: ForegroundPoints, grid: VoxelGrid) -> VoxelAssignment:
    """Assign every in-region point to the voxel floor((p - region_min) / size)."""
    dims = grid.dims
    pos = points.positions
    if len(pos) == 0:
        return VoxelAssignment(np.zeros((0, dims), dtype=np.int64), np.zeros(0, dtype=np.int64),
                               np.zeros(0, dtype=np.int64))
    inside = np.all((pos >= grid.region_min) & (pos < grid.region_max), axis=1)
    kept = np.flatnonzero(inside)
    if len(kept) < len(pos):
        logger.debug("voxelize: %d of %d points outside the region", len(pos) - len(kept), len(pos))

    size = np.array(grid.voxel_size[:dims])
    idx = np.floor((pos[kept, :dims] - grid.region_min[:dims]) / size).astype(np.int64)
    idx = np.minimum(idx, np.array(grid.shape) - 1)
    if len(kept) == 0:
        return VoxelAssignment(np.zeros((0, dims), dtype=np.int64), kept.astype(np.int64),
                               np.zeros(0, dtype=np.int64))
    coords, inverse = np.unique(idx, axis=0, return_inverse=True)
    return VoxelAssignment(coords, kept.astype(np.int64), inverse.reshape(-1).astype(np.int64))


@dataclass(frozen=True)
class AugmentedPoints:
    features: np.ndarray
    voxel_index: np.ndarray
    columns: Tuple[str, ...]

    @property
    def width(self) -> int:
        return self.features.shape[1]


def augmented_width(range_feature_width: int, temporal: bool, include_xyz: bool = True,
                    use_range_features: bool = True) -> int:
    width = 9
    width += 3 if include_xyz else 0
    width += range_feature_width if use_range_features else 0
    return width + (1 if temporal else 0)


def _group_mean(values: np.ndarray, group: np.ndarray, counts: np.ndarray) -> np.ndarray:
    return np.column_stack([np.bincount(group, weights=values[:, a], minlength=len(counts)) / counts
                            for a in range(values.shape[1])])


def augment_points(
    assignment: VoxelAssignment,
    points: ForegroundPoints,
    grid: VoxelGrid,
    frame_times: Optional[Sequence[float]] = None,
    temporal: bool = False,
    include_xyz: bool = True,
    use_range_features: bool = True,
) -> AugmentedPoints:
    """
    Per-point features [p, range_feature, p - m, var, p - c, (delta)].

    m and var are taken over the point's voxel; in temporal mode over its
    (voxel, frame) group, and delta is the frame's time offset.
    """
    temporal = temporal or frame_times is not None
    pos = points.positions[assignment.point_index]
    frames = points.frame_index[assignment.point_index]
    voxel = assignment.voxel_index

    if temporal:
        n_frames = int(frames.max()) + 1 if len(frames) else 1
        _, group = np.unique(voxel * n_frames + frames, return_inverse=True)
        group = group.reshape(-1)
    else:
        group = voxel
    counts = np.bincount(group).astype(np.float64)

    mean = _group_mean(pos, group, counts) if len(pos) else np.zeros((0, 3))
    centered = pos - mean[group]
    var = _group_mean(centered ** 2, group, counts)[group] if len(pos) else np.zeros((0, 3))
    centers = grid.voxel_centers(assignment.coords)[voxel]

    blocks, columns = [], []
    if include_xyz:
        blocks.append(pos)
        columns += ["x", "y", "z"]
    if use_range_features:
        blocks.append(points.features[assignment.point_index])
        columns += [f"rf{i}" for i in range(points.feature_width)]
    blocks += [centered, var, pos - centers]
    columns += ["dx_mean", "dy_mean", "dz_mean", "var_x", "var_y", "var_z", "dx_center", "dy_center", "dz_center"]
    if temporal:
        if frame_times is None:
            deltas = DEFAULT_FRAME_INTERVAL * frames.astype(np.float64)
        else:
            deltas = np.asarray(frame_times, dtype=np.float64)[frames]
        blocks.append(deltas[:, None])
        columns.append("delta")

    features = np.concatenate(blocks, axis=1) if len(pos) else np.zeros((0, len(columns)))
    return AugmentedPoints(features=features, voxel_index=voxel, columns=tuple(columns))


@dataclass(frozen=True)
class VoxelFeature:
    coord: Tuple[int, ...]
    feature: np.ndarray


@dataclass(frozen=True)
class VoxelFeatures:
    coords: np.ndarray
    features: np.ndarray

    def __len__(self) -> int:
        return len(self.coords)

    def __getitem__(self, i: int) -> VoxelFeature:
        return VoxelFeature(tuple(int(c) for c in self.coords[i]), self.features[i])


def pointnet_layer_specs(in_width: int, out_width: int) -> Dict[str, Tuple[int, ...]]:
    return {
        "pointnet.linear.weight": (in_width, out_width),
        "pointnet.linear.bias": (out_width,),
        "pointnet.norm.gain": (out_width,),
        "pointnet.norm.bias": (out_width,),
    }


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LAYER_NORM_EPS) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gain + bias


def _scatter_max(values: np.ndarray, index: np.ndarray, size: int) -> np.ndarray:
    out = np.full((size, values.shape[1]), -np.inf)
    np.maximum.at(out, index, values)
    return out


def voxel_pointnet(
    aug: AugmentedPoints,
    assignment: VoxelAssignment,
    weights: Optional[Mapping[str, np.ndarray]] = None,
    use_pointnet: bool = True,
) -> VoxelFeatures:
    """linear -> layer norm -> ReLU per point, then a channelwise max per voxel."""
    if not use_pointnet:
        return VoxelFeatures(assignment.coords, _scatter_max(aug.features, aug.voxel_index, assignment.num_voxels))

    if weights is None:
        raise ValueError("voxel_pointnet needs weights when the PointNet is enabled")
    w = weights["pointnet.linear.weight"]
    if w.shape[0] != aug.width:
        raise ValueError(f"PointNet expects {w.shape[0]} input features, got {aug.width}")
    hidden = aug.features @ w + weights["pointnet.linear.bias"]
    hidden = layer_norm(hidden, weights["pointnet.norm.gain"], weights["pointnet.norm.bias"])
    hidden = np.maximum(hidden, 0.0)
    return VoxelFeatures(assignment.coords, _scatter_max(hidden, aug.voxel_index, assignment.num_voxels))


# -------------------------
# Temporal fusion
# -------------------------

@dataclass(frozen=True)
class TemporalFrame:
    points: ForegroundPoints
    pose: RigidTransform
    timestamp: Optional[float] = None


@dataclass(frozen=True)
class MergedPoints:
    points: ForegroundPoints
    frame_deltas: np.ndarray


def temporal_merge(frames: Sequence[TemporalFrame], k: int) -> MergedPoints:
    """
    Bring frames (latest first) into the latest frame's coordinates.

    Each point keeps its frame index; frame_deltas[i] is the time offset of
    frame i relative to frame 0.
    """
    if len(frames) != k + 1:
        raise ValueError(f"temporal_merge expected {k + 1} frames for k={k}, got {len(frames)}")
    reference = frames[0].pose.inverse()
    timestamps = [f.timestamp for f in frames]
    if all(t is not None for t in timestamps):
        deltas = np.array([timestamps[0] - t for t in timestamps], dtype=np.float64)
    else:
        deltas = DEFAULT_FRAME_INTERVAL * np.arange(len(frames), dtype=np.float64)

    merged = []
    for i, frame in enumerate(frames):
        pts = frame.points
        if i > 0:
            pts = pts.with_positions(reference.compose(frame.pose).apply_points(pts.positions))
        merged.append(pts.with_frame_index(i))

    points = ForegroundPoints(
        positions=np.concatenate([m.positions for m in merged]),
        features=np.concatenate([m.features for m in merged]),
        pixels=np.concatenate([m.pixels for m in merged]),
        frame_index=np.concatenate([m.frame_index for m in merged]),
        scores=np.concatenate([m.scores for m in merged]),
    )
    return MergedPoints(points, deltas)


def regroup_sequence(frames: Sequence, k: int) -> List[Tuple]:
    """Tuple i is (f_i, f_{i-1}, ..., f_{i-k}) with indices clamped at 0."""
    if not frames:
        raise ValueError("regroup_sequence needs at least one frame")
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    return [tuple(frames[max(i - j, 0)] for j in range(k + 1)) for i in range(len(frames))]
