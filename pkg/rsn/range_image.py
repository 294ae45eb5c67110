# rsn/range_image.py
"""
Range images: spherical projection of point clouds, channel normalization,
pixel unprojection, foreground labels and the "RSNR" file format.
"""
from __future__ import annotations

from dataclasses import dataclass
import json
import logging
import math
from pathlib import Path
import struct
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .core import Box7, DenseTensor, TWO_PI, points_in_box

logger = logging.getLogger(__name__)

RANGE_IMAGE_MAGIC = b"RSNR"
DEFAULT_INCLINATION_RANGE = (-0.3, 0.1)


def default_inclinations(height: int = 64, low: float = DEFAULT_INCLINATION_RANGE[0],
                         high: float = DEFAULT_INCLINATION_RANGE[1]) -> np.ndarray:
    """Uniform beam fan, strictly decreasing from ``high`` to ``low``."""
    if height < 1:
        raise ValueError(f"Range image height must be positive, got {height}")
    if height == 1:
        return np.array([0.5 * (low + high)])
    return np.linspace(high, low, height)


@dataclass(frozen=True)
class RangeImage:
    range: np.ndarray
    intensity: np.ndarray
    elongation: np.ndarray
    valid: np.ndarray
    inclinations: np.ndarray
    azimuth_span: float = TWO_PI

    def __post_init__(self):
        rng = np.asarray(self.range, dtype=np.float64)
        if rng.ndim != 2:
            raise ValueError(f"Range plane must be 2D, got shape {rng.shape}")
        planes = {}
        for name in ("intensity", "elongation"):
            plane = np.asarray(getattr(self, name), dtype=np.float64)
            if plane.shape != rng.shape:
                raise ValueError(f"{name} plane shape {plane.shape} != range shape {rng.shape}")
            planes[name] = plane
        valid = np.asarray(self.valid, dtype=bool)
        if valid.shape != rng.shape:
            raise ValueError(f"validity shape {valid.shape} != range shape {rng.shape}")
        incl = np.asarray(self.inclinations, dtype=np.float64)
        if incl.shape != (rng.shape[0],):
            raise ValueError(f"Expected {rng.shape[0]} beam inclinations, got {incl.shape}")
        if incl.size > 1 and not np.all(np.diff(incl) < 0):
            raise ValueError("Beam inclinations must be strictly decreasing")
        if np.any(rng[valid] < 0):
            raise ValueError("Valid pixels must carry a non-negative range")

        # invalid pixels carry zeros in every channel
        rng = np.where(valid, rng, 0.0)
        for name, plane in planes.items():
            planes[name] = np.where(valid, plane, 0.0)
        for arr in (rng, valid, incl, *planes.values()):
            arr.setflags(write=False)
        object.__setattr__(self, "range", rng)
        object.__setattr__(self, "valid", valid)
        object.__setattr__(self, "inclinations", incl)
        for name, plane in planes.items():
            object.__setattr__(self, name, plane)

    @property
    def height(self) -> int:
        return self.range.shape[0]

    @property
    def width(self) -> int:
        return self.range.shape[1]

    @property
    def azimuths(self) -> np.ndarray:
        """Column-center azimuths, starting at -pi."""
        return -math.pi + np.arange(self.width) * (self.azimuth_span / self.width)


@dataclass(frozen=True)
class LabeledRangeImage:
    image: RangeImage
    fg_label: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.fg_label, dtype=bool)
        if labels.shape != self.image.range.shape:
            raise ValueError(f"Label shape {labels.shape} != image shape {self.image.range.shape}")
        if np.any(labels & ~self.image.valid):
            raise ValueError("Foreground labels must be false on invalid pixels")
        labels.setflags(write=False)
        object.__setattr__(self, "fg_label", labels)


def normalize(image: RangeImage, caps: Sequence[float] = (79.5, 2.0, 2.0)) -> DenseTensor:
    """Stack range/intensity/elongation as min(v, m) / m; invalid pixels stay 0."""
    if len(caps) != 3:
        raise ValueError(f"Expected 3 normalization caps, got {len(caps)}")
    if any(c <= 0 for c in caps):
        raise ValueError(f"Normalization caps must be positive, got {tuple(caps)}")
    planes = []
    for plane, cap in zip((image.range, image.intensity, image.elongation), caps):
        normalized = np.minimum(np.maximum(plane, 0.0), cap) / cap
        planes.append(np.where(image.valid, normalized, 0.0))
    return DenseTensor(np.stack(planes, axis=-1))


def pixel_of_points(points: np.ndarray, width: int, inclinations: np.ndarray,
                    azimuth_span: float = TWO_PI) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Map (N, >=3) points to (row, col, range).

    Rows are the nearest beam; points outside the beam fan by more than half
    a row spacing get row -1.
    """
    pts = np.asarray(points, dtype=np.float64)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    planar = np.hypot(x, y)
    ranges = np.sqrt(planar ** 2 + z ** 2)
    inclination = np.arctan2(z, planar)
    azimuth = np.arctan2(y, x)

    step = azimuth_span / width
    cols = np.mod(np.rint((azimuth + math.pi) / step).astype(np.int64), width)

    rows = np.argmin(np.abs(inclination[:, None] - inclinations[None, :]), axis=1).astype(np.int64)
    if len(inclinations) > 1:
        half_top = 0.5 * (inclinations[0] - inclinations[1])
        half_bottom = 0.5 * (inclinations[-2] - inclinations[-1])
    else:
        half_top = half_bottom = math.pi
    outside = (inclination > inclinations[0] + half_top) | (inclination < inclinations[-1] - half_bottom)
    rows[outside] = -1
    return rows, cols, ranges


def project(points: np.ndarray, height: int, width: int,
            inclinations: Optional[Sequence[float]] = None) -> RangeImage:
    """
    Project (N, 5) points [x, y, z, intensity, elongation] into a range image.

    A pixel hit by several points keeps the one with the larger range.
    """
    if inclinations is None:
        raise ValueError("Beam inclinations are required")
    incl = np.asarray(inclinations, dtype=np.float64)
    if incl.size == 0:
        raise ValueError("Beam inclination list is empty")
    if height != incl.size:
        raise ValueError(f"height {height} does not match {incl.size} inclinations")
    if width < 1:
        raise ValueError(f"Range image width must be positive, got {width}")

    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        pts = pts.reshape(0, 5)
    shape = (height, width)
    range_plane = np.zeros(shape)
    intensity = np.zeros(shape)
    elongation = np.zeros(shape)
    valid = np.zeros(shape, dtype=bool)

    if pts.shape[0] > 0:
        if pts.shape[1] < 5:
            pts = np.column_stack([pts, np.zeros((pts.shape[0], 5 - pts.shape[1]))])
        rows, cols, ranges = pixel_of_points(pts, width, incl)
        keep = rows >= 0
        dropped = int((~keep).sum())
        if dropped:
            logger.debug("project: %d points outside the beam fan dropped", dropped)
        idx = np.flatnonzero(keep)
        flat = rows[idx] * width + cols[idx]
        # sort by pixel, then range; the last entry of each pixel run wins
        order = np.lexsort((ranges[idx], flat))
        flat_sorted = flat[order]
        last = np.r_[flat_sorted[1:] != flat_sorted[:-1], True]
        winners = idx[order[last]]
        target = flat_sorted[last]
        r, c = np.divmod(target, width)
        range_plane[r, c] = ranges[winners]
        intensity[r, c] = pts[winners, 3]
        elongation[r, c] = pts[winners, 4]
        valid[r, c] = True

    return RangeImage(range_plane, intensity, elongation, valid, incl)


def unproject(image: RangeImage) -> Tuple[np.ndarray, np.ndarray]:
    """
    Return (pixels, points) for the valid pixels in (row, col) order.

    pixels is (M, 2) int [row, col]; points is (M, 3).
    """
    rows, cols = np.nonzero(image.valid)
    ranges = image.range[rows, cols]
    incl = image.inclinations[rows]
    az = image.azimuths[cols]
    cos_incl = np.cos(incl)
    points = np.column_stack([
        ranges * cos_incl * np.cos(az),
        ranges * cos_incl * np.sin(az),
        ranges * np.sin(incl),
    ])
    return np.column_stack([rows, cols]).astype(np.int64), points


def label_foreground(image: RangeImage, boxes: Sequence[Box7]) -> LabeledRangeImage:
    labels = np.zeros(image.range.shape, dtype=bool)
    pixels, points = unproject(image)
    if len(points) and boxes:
        hit = np.zeros(len(points), dtype=bool)
        for box in boxes:
            hit |= points_in_box(points, box)
        labels[pixels[hit, 0], pixels[hit, 1]] = True
    return LabeledRangeImage(image, labels)


# -------------------------
# File format
# -------------------------

def write_range_image(path: Union[str, Path], image: RangeImage, metadata: Optional[dict] = None) -> Path:
    """Write the little-endian "RSNR" binary and its JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(RANGE_IMAGE_MAGIC)
        fh.write(struct.pack("<II", image.height, image.width))
        for plane in (image.range, image.intensity, image.elongation):
            fh.write(plane.astype("<f4").tobytes())
        fh.write(image.valid.astype(np.uint8).tobytes())
        fh.write(image.inclinations.astype("<f4").tobytes())

    sidecar = {
        "height": image.height,
        "width": image.width,
        "azimuth_span": image.azimuth_span,
        "valid_pixels": int(image.valid.sum()),
    }
    sidecar.update(metadata or {})
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def read_range_image(path: Union[str, Path]) -> Tuple[RangeImage, dict]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != RANGE_IMAGE_MAGIC:
        raise ValueError(f"{path} is not a range image file (bad magic {blob[:4]!r})")
    height, width = struct.unpack_from("<II", blob, 4)
    offset = 12
    n = height * width

    def take(count: int, dtype: str) -> np.ndarray:
        nonlocal offset
        size = np.dtype(dtype).itemsize * count
        if offset + size > len(blob):
            raise ValueError(f"{path} is truncated")
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
        offset += size
        return arr

    planes = [take(n, "<f4").astype(np.float64).reshape(height, width) for _ in range(3)]
    valid = take(n, "u1").reshape(height, width).astype(bool)
    inclinations = take(height, "<f4").astype(np.float64)

    meta_path = sidecar_path(path)
    metadata = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    image = RangeImage(planes[0], planes[1], planes[2], valid, inclinations,
                       azimuth_span=float(metadata.get("azimuth_span", TWO_PI)))
    return image, metadata


def sidecar_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")
