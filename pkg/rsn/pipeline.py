# rsn/pipeline.py
"""
End-to-end runs: range image -> U-Net -> foreground selection -> (temporal
merge) -> voxel features -> sparse backbone -> head decode, plus the
gamma-sweep benchmark and the scene-level worker pool.
"""
from __future__ import annotations

from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field
import hashlib
import json
import logging
import math
from pathlib import Path
import threading
import time
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

from joblib import Parallel, delayed
import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import logit
from tqdm import tqdm

from .core import Detection, DetectorConfig
from .errors import MonotonicityError, PipelineStageError
from .foreground import ForegroundPoints, recall_precision, select_foreground, selection_mask
from .geometry import IouLossKind
from .head import HeadSites, decode, head_forward, head_layer_specs, plant_head_output
from .range_image import RangeImage, default_inclinations, label_foreground, normalize, project
from .rife import RifeOutput, UNetConfig, unet_forward, unet_layer_specs
from .sparse_engine import BlockStats, SparseTensor, SpfeConfig, spfe_layer_specs, trace_spfe
from .synth import Scene
from .voxelizer import (
    TemporalFrame,
    VoxelGrid,
    augment_points,
    augmented_width,
    pointnet_layer_specs,
    temporal_merge,
    voxel_pointnet,
    voxelize_dynamic,
)

logger = logging.getLogger(__name__)

ORACLE_SEG_LOGIT = 10.0
BENCH_POSITIVE_SCORE = 0.75
BENCH_NEGATIVE_SCORE = 0.05

STAGES = ("project", "normalize", "rife", "select", "merge", "voxelize", "spfe", "head")


# -------------------------
# Run configuration
# -------------------------

class RunConfig(BaseModel):
    """Everything a pipeline run depends on besides the weights and the scenes."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = "CarS"
    detector: DetectorConfig = Field(default_factory=DetectorConfig)
    unet: UNetConfig = Field(default_factory=UNetConfig)
    spfe: SpfeConfig = Field(default_factory=lambda: SpfeConfig.preset("CarS"))
    seed: int = 0
    num_frames: int = Field(1, ge=1)
    image_height: int = Field(64, ge=1)
    image_width: int = Field(1024, ge=1)
    inclination_range: Tuple[float, float] = (-0.3, 0.1)
    use_pointnet: bool = True
    pointnet_channels: int = Field(64, ge=1)
    include_xyz: bool = True
    use_range_features: bool = True
    iou_loss_kind: IouLossKind = IouLossKind.PLAIN

    @model_validator(mode="after")
    def _consistent(self):
        expected_dims = 2 if self.detector.pillar else 3
        if self.spfe.dims != expected_dims:
            raise ValueError(f"SPFE is {self.spfe.dims}D but the voxel grid is {expected_dims}D")
        stride = self.unet.total_stride
        if self.image_height % stride or self.image_width % stride:
            raise ValueError(
                f"Range image {self.image_height}x{self.image_width} is not divisible by the U-Net stride {stride}"
            )
        low, high = self.inclination_range
        if not low < high:
            raise ValueError(f"inclination_range must be increasing, got {self.inclination_range}")
        return self

    @property
    def temporal(self) -> bool:
        return self.num_frames > 1

    @property
    def inclinations(self) -> np.ndarray:
        return default_inclinations(self.image_height, *self.inclination_range)

    @property
    def point_width(self) -> int:
        return augmented_width(self.unet.feature_channels, self.temporal, self.include_xyz, self.use_range_features)

    @property
    def spfe_in_channels(self) -> int:
        return self.pointnet_channels if self.use_pointnet else self.point_width

    @property
    def head_in_channels(self) -> int:
        return self.spfe.out_channels or self.spfe_in_channels

    def layer_specs(self) -> Dict[str, Tuple[int, ...]]:
        specs: Dict[str, Tuple[int, ...]] = {}
        for name, shape in unet_layer_specs(self.unet).items():
            specs[f"{name}.kernel"] = shape
            specs[f"{name}.bias"] = (shape[-1],)
        if self.use_pointnet:
            specs.update(pointnet_layer_specs(self.point_width, self.pointnet_channels))
        specs.update(spfe_layer_specs(self.spfe, self.spfe_in_channels))
        specs.update(head_layer_specs(self.head_in_channels, self.detector.num_heading_bins))
        return specs

    @classmethod
    def preset(cls, name: str, **overrides) -> "RunConfig":
        """CarS, CarL, CarXL, PedS, PedL; a ``_3f`` suffix selects three input frames."""
        base, _, suffix = name.partition("_")
        if suffix not in ("", "3f"):
            raise ValueError(f"Unknown preset suffix in {name!r}; only '_3f' is supported")
        spfe = SpfeConfig.preset(base)
        if base.startswith("Ped"):
            detector = DetectorConfig.pedestrian()
        elif base == "CarXL":
            detector = DetectorConfig.vehicle(voxel_size=(0.2, 0.2, 0.2))
        else:
            detector = DetectorConfig.vehicle()
        values = dict(
            name=name,
            detector=detector,
            spfe=spfe,
            num_frames=3 if suffix == "3f" else 1,
            use_pointnet=base != "CarXL",
        )
        values.update(overrides)
        return cls(**values)

    def to_json(self) -> str:
        # stdlib json so an infinite voxel height survives as Infinity
        return json.dumps(self.model_dump(mode="python"), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.model_validate(json.loads(text))

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunConfig":
        return cls.from_json(Path(path).read_text())


# -------------------------
# Range-feature cache
# -------------------------

def feature_fingerprint(config: RunConfig, weights: Mapping[str, np.ndarray]) -> str:
    """Digest of the run configuration and the U-Net tensors behind a foreground selection."""
    digest = hashlib.sha256(config.to_json().encode("utf-8"))
    for name in sorted(n for n in weights if n.startswith("unet.")):
        tensor = np.ascontiguousarray(weights[name], dtype=np.float64)
        digest.update(name.encode("utf-8"))
        digest.update(str(tensor.shape).encode("utf-8"))
        digest.update(tensor.tobytes())
    return digest.hexdigest()


class RangeFeatureCache:
    """
    LRU store of per-frame foreground selections, so a frame reused by
    several temporal windows runs the U-Net once.

    Keys carry a fingerprint of the config and U-Net weights, so one cache
    shared between runs never hands a selection to a different network.
    Weight mappings are treated as immutable once fingerprinted.
    """

    def __init__(self, capacity: int = 8):
        if capacity < 0:
            raise ValueError(f"Cache capacity must be non-negative, got {capacity}")
        self.capacity = capacity
        self._items: "OrderedDict[tuple, ForegroundPoints]" = OrderedDict()
        self._fingerprints: Dict[int, Tuple[Mapping[str, np.ndarray], RunConfig, str]] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def fingerprint(self, config: RunConfig, weights: Mapping[str, np.ndarray]) -> str:
        with self._lock:
            known = self._fingerprints.get(id(weights))
        if known is not None and known[0] is weights and known[1] == config:
            return known[2]
        value = feature_fingerprint(config, weights)
        with self._lock:
            # the stored mapping keeps id(weights) from being reused
            self._fingerprints[id(weights)] = (weights, config, value)
        return value

    def get(self, key: tuple) -> Optional[ForegroundPoints]:
        with self._lock:
            if key in self._items:
                self._items.move_to_end(key)
                self.hits += 1
                return self._items[key]
            self.misses += 1
            return None

    def put(self, key: tuple, value: ForegroundPoints) -> None:
        if self.capacity == 0:
            return
        with self._lock:
            self._items[key] = value
            self._items.move_to_end(key)
            while len(self._items) > self.capacity:
                self._items.popitem(last=False)

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, key: tuple) -> bool:
        return key in self._items


# -------------------------
# Pipeline
# -------------------------

@dataclass
class PipelineResult:
    scene_id: str
    detections: List[Detection]
    timings: Dict[str, float] = field(default_factory=dict)
    stats: Dict[str, int] = field(default_factory=dict)
    block_stats: List[BlockStats] = field(default_factory=list)


@contextmanager
def _stage(name: str, timings: Dict[str, float]) -> Iterator[None]:
    start = time.perf_counter()
    try:
        yield
    except PipelineStageError:
        raise
    except Exception as exc:
        raise PipelineStageError(name, str(exc)) from exc
    finally:
        timings[name] = timings.get(name, 0.0) + 1000.0 * (time.perf_counter() - start)


def oracle_seg_logits(image: RangeImage, scene: Scene, class_id: int,
                      positive: float = ORACLE_SEG_LOGIT, negative: float = -ORACLE_SEG_LOGIT) -> np.ndarray:
    labels = label_foreground(image, scene.boxes_of_class(class_id)).fg_label
    return np.where(labels, positive, negative)


def range_features(scene: Scene, config: RunConfig, weights: Mapping[str, np.ndarray],
                   timings: Dict[str, float]) -> Tuple[RangeImage, RifeOutput]:
    with _stage("project", timings):
        image = project(scene.points, config.image_height, config.image_width, config.inclinations)
    with _stage("normalize", timings):
        tensor = normalize(image, config.detector.norm_caps)
    with _stage("rife", timings):
        rife = unet_forward(tensor, config.unet, weights)
    return image, rife


def _select_frame(scene: Scene, frame_index: int, config: RunConfig, weights: Mapping[str, np.ndarray],
                  oracle: bool, cache: Optional[RangeFeatureCache], timings: Dict[str, float]) -> ForegroundPoints:
    key = None
    if cache is not None:
        key = (scene.scene_id, oracle, config.detector.gamma, cache.fingerprint(config, weights))
    cached = cache.get(key) if cache is not None else None
    if cached is not None:
        return cached.with_frame_index(frame_index)

    image, rife = range_features(scene, config, weights, timings)
    if oracle:
        rife = RifeOutput(oracle_seg_logits(image, scene, config.detector.class_id), rife.features)
    with _stage("select", timings):
        points = select_foreground(rife, image, config.detector.gamma, frame_index)
    if cache is not None:
        cache.put(key, points)
    return points


def site_margin(grid: VoxelGrid, stride_level: int) -> float:
    """Half the diagonal of a head site cell."""
    size = np.array(grid.voxel_size[:grid.dims]) * stride_level
    return 0.5 * float(np.linalg.norm(size)) + 1e-6


def run_pipeline(frames: Union[Scene, Sequence[Scene]], config: RunConfig, weights: Mapping[str, np.ndarray],
                 oracle: bool = False, cache: Optional[RangeFeatureCache] = None) -> PipelineResult:
    """
    Detect objects of ``config.detector``'s class in the latest frame.

    ``frames`` is one scene or ``num_frames`` scenes ordered latest first.
    With ``oracle`` the segmentation and head outputs are built from the
    ground truth of each scene instead of the network.
    """
    frames = [frames] if isinstance(frames, Scene) else list(frames)
    if len(frames) != config.num_frames:
        raise ValueError(f"Run expects {config.num_frames} frames, got {len(frames)}")
    latest = frames[0]
    timings: Dict[str, float] = {}
    stats: Dict[str, int] = {}

    selections = [_select_frame(scene, i, config, weights, oracle, cache, timings) for i, scene in enumerate(frames)]
    with _stage("merge", timings):
        merged = temporal_merge(
            [TemporalFrame(sel, scene.pose, scene.timestamp) for sel, scene in zip(selections, frames)],
            config.num_frames - 1,
        )
    points = merged.points
    stats["selected_points"] = len(points)

    grid = VoxelGrid.from_config(config.detector)
    with _stage("voxelize", timings):
        assignment = voxelize_dynamic(points, grid)
        stats["voxels"] = assignment.num_voxels
        if assignment.num_voxels:
            aug = augment_points(
                assignment, points, grid,
                frame_times=merged.frame_deltas if config.temporal else None,
                temporal=config.temporal,
                include_xyz=config.include_xyz,
                use_range_features=config.use_range_features,
            )
            voxels = voxel_pointnet(aug, assignment, weights, config.use_pointnet)

    if assignment.num_voxels == 0:
        logger.info("%s: no foreground voxels, nothing to detect", latest.scene_id)
        stats.update(spfe_in_sites=0, spfe_out_sites=0, spfe_pairs=0, detections=0)
        return PipelineResult(latest.scene_id, [], timings, stats)

    with _stage("spfe", timings):
        tensor = SparseTensor(grid.dims, voxels.coords, voxels.features)
        backbone, block_stats = trace_spfe(tensor, config.spfe, weights)
    stats["spfe_in_sites"] = tensor.num_sites
    stats["spfe_out_sites"] = backbone.num_sites
    stats["spfe_pairs"] = sum(b.pairs for b in block_stats)

    with _stage("head", timings):
        sites = HeadSites(backbone.coords, grid.site_positions(backbone.coords, backbone.stride_level))
        if oracle:
            head = plant_head_output(sites, latest.boxes_of_class(config.detector.class_id), config.detector,
                                     margin=site_margin(grid, backbone.stride_level))
        else:
            head = head_forward(backbone.features, weights, config.detector.num_heading_bins)
        detections = decode(head, sites, config.detector)
    stats["detections"] = len(detections)

    logger.debug("%s: %s", latest.scene_id,
                 ", ".join(f"{name}={timings[name]:.1f}ms" for name in STAGES if name in timings))
    return PipelineResult(latest.scene_id, detections, timings, stats, block_stats)


def process_scenes(groups: Sequence[Sequence[Scene]], config: RunConfig, weights: Mapping[str, np.ndarray],
                   threads: int = 1, oracle: bool = False, cache: Optional[RangeFeatureCache] = None,
                   progress: bool = False) -> List[PipelineResult]:
    """Run every frame group on a thread pool; results keep the input order."""
    jobs = (delayed(run_pipeline)(group, config, weights, oracle, cache)
            for group in tqdm(groups, desc="scenes", disable=not progress))
    return Parallel(n_jobs=max(1, threads), prefer="threads")(jobs)


# -------------------------
# Gamma sweep
# -------------------------

BENCH_COLUMNS = ["gamma", "selected_points", "spfe_pairs", "wall_ms", "recall"]


def bench_gamma_sweep(scenes: Sequence[Scene], config: RunConfig, weights: Mapping[str, np.ndarray],
                      gammas: Sequence[float], oracle: bool = True,
                      positive_score: float = BENCH_POSITIVE_SCORE,
                      negative_score: float = BENCH_NEGATIVE_SCORE) -> pd.DataFrame:
    """
    One row per gamma (ascending): selected points, sparse-backbone rulebook
    pairs, wall time of selection through the backbone, and pooled pixel
    recall. Selection and pair counts must not increase with gamma.

    With ``oracle`` the segmentation scores are ``positive_score`` on
    labeled foreground pixels and ``negative_score`` elsewhere.
    """
    if len(gammas) < 2:
        raise ValueError(f"A gamma sweep needs at least 2 values, got {len(gammas)}")
    if config.num_frames != 1:
        raise ValueError("The gamma sweep runs single-frame configurations")
    gammas = sorted(float(g) for g in gammas)
    grid = VoxelGrid.from_config(config.detector)

    prepared = []
    for scene in scenes:
        image, rife = range_features(scene, config, weights, {})
        labels = label_foreground(image, scene.boxes_of_class(config.detector.class_id)).fg_label
        if oracle:
            seg = np.where(labels, logit(positive_score), logit(negative_score))
            rife = RifeOutput(seg, rife.features)
        prepared.append((image, rife, labels))

    rows = []
    for gamma in gammas:
        selected = pairs = hits = positives = 0
        start = time.perf_counter()
        for image, rife, labels in prepared:
            points = select_foreground(rife, image, gamma)
            selected += len(points)
            if labels.any():
                recall, _ = recall_precision(selection_mask(points, labels.shape), labels)
                positives += int(labels.sum())
                hits += int(round(recall * labels.sum()))
            assignment = voxelize_dynamic(points, grid)
            if assignment.num_voxels == 0:
                continue
            aug = augment_points(assignment, points, grid, include_xyz=config.include_xyz,
                                 use_range_features=config.use_range_features)
            voxels = voxel_pointnet(aug, assignment, weights, config.use_pointnet)
            _, block_stats = trace_spfe(SparseTensor(grid.dims, voxels.coords, voxels.features), config.spfe, weights)
            pairs += sum(b.pairs for b in block_stats)
        rows.append({
            "gamma": gamma,
            "selected_points": selected,
            "spfe_pairs": pairs,
            "wall_ms": 1000.0 * (time.perf_counter() - start),
            "recall": hits / positives if positives else math.nan,
        })
        logger.debug("gamma %.3f: %d points, %d pairs", gamma, selected, pairs)

    table = pd.DataFrame(rows, columns=BENCH_COLUMNS)
    for column in ("selected_points", "spfe_pairs"):
        if not table[column].is_monotonic_decreasing:
            raise MonotonicityError(f"{column} increased with gamma: {table[column].tolist()}")
    return table
