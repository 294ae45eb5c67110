# rsn/sparse_engine.py
"""
Sparse tensors over integer grids, rulebook construction for submanifold
(SSC) and regular strided (SC) sparse convolutions, gather-matmul-scatter
execution, submanifold max pooling and the config-driven SPFE executor.

Offsets follow convolution indexing: for stride s a pair (i -> o) exists for
offset k when s * coord(o) - coord(i) = k, and W[k] multiplies in(i).
Offsets are enumerated in lexicographic order over {-r..r}^dims.
"""
from __future__ import annotations

from dataclasses import dataclass
import itertools
import logging
from typing import Dict, List, Literal, Mapping, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

logger = logging.getLogger(__name__)


def lexsort_rows(coords: np.ndarray) -> np.ndarray:
    """Indices that sort integer rows lexicographically (first column most significant)."""
    if coords.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.lexsort(coords.T[::-1])


@dataclass(frozen=True)
class SparseTensor:
    dims: int
    coords: np.ndarray
    features: np.ndarray
    stride_level: int = 1

    def __post_init__(self):
        if self.dims not in (2, 3):
            raise ValueError(f"SparseTensor dims must be 2 or 3, got {self.dims}")
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, self.dims)
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != coords.shape[0]:
            raise ValueError(f"{coords.shape[0]} sites but feature array of shape {features.shape}")
        if len(coords) > 1:
            order = lexsort_rows(coords)
            coords, features = coords[order], features[order]
            if np.any(np.all(coords[1:] == coords[:-1], axis=1)):
                raise ValueError("SparseTensor coordinates must be unique")
        coords.setflags(write=False)
        features.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", features)

    @property
    def num_sites(self) -> int:
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def with_features(self, features: np.ndarray) -> "SparseTensor":
        return SparseTensor(self.dims, self.coords, features, self.stride_level)

    def to_dense(self, origin: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        """Zero-filled dense array of shape ``shape + (C,)`` with ``origin`` at index 0."""
        dense = np.zeros(tuple(shape) + (self.channels,))
        idx = self.coords - np.asarray(origin)
        dense[tuple(idx.T)] = self.features
        return dense


class CoordIndex:
    """
    Coordinate -> site-index lookup over a lexicographically sorted site list.

    Coordinates are linearized inside a padded bounding box; row-major keys of
    sorted rows are themselves sorted, so lookups are a binary search.
    """

    def __init__(self, coords: np.ndarray, margin: int = 2):
        self.coords = coords
        if len(coords) == 0:
            self._lo = np.zeros(coords.shape[1], dtype=np.int64)
            self._shape = np.ones(coords.shape[1], dtype=np.int64)
            self._keys = np.zeros(0, dtype=np.int64)
            return
        self._lo = coords.min(axis=0) - margin
        self._shape = coords.max(axis=0) + margin - self._lo + 1
        self._keys = np.ravel_multi_index(tuple((coords - self._lo).T), tuple(self._shape))

    def lookup(self, queries: np.ndarray) -> np.ndarray:
        """Site index of each query row, or -1 when absent."""
        result = np.full(len(queries), -1, dtype=np.int64)
        if len(self._keys) == 0 or len(queries) == 0:
            return result
        rel = queries - self._lo
        inside = np.all((rel >= 0) & (rel < self._shape), axis=1)
        keys = np.ravel_multi_index(tuple(rel[inside].T), tuple(self._shape))
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, len(self._keys) - 1)
        found = self._keys[pos] == keys
        hits = np.flatnonzero(inside)
        result[hits[found]] = pos[found]
        return result


def kernel_offsets(dims: int, kernel_extent: int = 3) -> np.ndarray:
    if kernel_extent < 1 or kernel_extent % 2 == 0:
        raise ValueError(f"Kernel extent must be a positive odd number, got {kernel_extent}")
    r = kernel_extent // 2
    return np.array(list(itertools.product(range(-r, r + 1), repeat=dims)), dtype=np.int64)


@dataclass(frozen=True)
class Rulebook:
    offsets: np.ndarray
    pairs: Tuple[Tuple[np.ndarray, np.ndarray], ...]
    out_coords: np.ndarray
    stride: int
    out_stride_level: int
    kind: str = "SSC"

    @property
    def total_pairs(self) -> int:
        return int(sum(len(i) for i, _ in self.pairs))

    @property
    def num_out_sites(self) -> int:
        return len(self.out_coords)


def build_rulebook_ssc(input: SparseTensor, kernel_extent: int = 3) -> Rulebook:
    """Output sites are the input sites; pair (i -> o) for k = coord(o) - coord(i)."""
    offsets = kernel_offsets(input.dims, kernel_extent)
    index = CoordIndex(input.coords, margin=kernel_extent)
    pairs = []
    for k in offsets:
        src = index.lookup(input.coords - k)
        out_idx = np.flatnonzero(src >= 0)
        pairs.append((src[out_idx], out_idx))
    return Rulebook(offsets, tuple(pairs), input.coords, 1, input.stride_level, "SSC")


def build_rulebook_sc(input: SparseTensor, kernel_extent: int = 3, stride: int = 1) -> Rulebook:
    """Output sites are every o with s * o - k active for some offset k."""
    if stride not in (1, 2):
        raise ValueError(f"SC stride must be 1 or 2, got {stride}")
    offsets = kernel_offsets(input.dims, kernel_extent)
    out_level = input.stride_level * stride
    if input.num_sites == 0:
        empty = tuple((np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)) for _ in offsets)
        return Rulebook(offsets, empty, np.zeros((0, input.dims), dtype=np.int64), stride, out_level, "SC")

    candidates = []
    for k in offsets:
        shifted = input.coords + k
        ok = np.all(shifted % stride == 0, axis=1)
        candidates.append(shifted[ok] // stride)
    out_coords = np.unique(np.concatenate(candidates), axis=0)

    index = CoordIndex(out_coords, margin=kernel_extent)
    pairs = []
    for k in offsets:
        shifted = input.coords + k
        ok = np.all(shifted % stride == 0, axis=1)
        in_idx = np.flatnonzero(ok)
        out_idx = index.lookup(shifted[ok] // stride)
        pairs.append((in_idx, out_idx))
    return Rulebook(offsets, tuple(pairs), out_coords, stride, out_level, "SC")


def sparse_conv_forward(input: SparseTensor, weights: np.ndarray, rulebook: Rulebook,
                        bias: Optional[np.ndarray] = None) -> SparseTensor:
    """Gather, multiply by W[offset], scatter-add; offsets reduced in a fixed order."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 3 or weights.shape[0] != len(rulebook.offsets):
        raise ValueError(f"Weights must be ({len(rulebook.offsets)}, C_in, C_out), got {weights.shape}")
    if weights.shape[1] != input.channels:
        raise ValueError(f"Weights expect {weights.shape[1]} input channels, tensor has {input.channels}")
    c_out = weights.shape[2]
    if bias is None:
        bias = np.zeros(c_out)
    bias = np.asarray(bias, dtype=np.float64)
    if bias.shape != (c_out,):
        raise ValueError(f"Bias shape {bias.shape} does not match {c_out} output channels")

    out = np.broadcast_to(bias, (rulebook.num_out_sites, c_out)).copy()
    for k, (in_idx, out_idx) in enumerate(rulebook.pairs):
        if len(in_idx):
            # each output appears at most once per offset
            out[out_idx] += input.features[in_idx] @ weights[k]
    return SparseTensor(input.dims, rulebook.out_coords, out, rulebook.out_stride_level)


def sparse_max_pool(input: SparseTensor, window: int = 3) -> SparseTensor:
    """Channelwise max over active sites in the window centered at each site."""
    rulebook = build_rulebook_ssc(input, window)
    out = input.features.copy()
    for in_idx, out_idx in rulebook.pairs:
        if len(in_idx):
            out[out_idx] = np.maximum(out[out_idx], input.features[in_idx])
    return input.with_features(out)


# -------------------------
# SPFE
# -------------------------

class SpfeBlock(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["SSC", "SC"]
    stride: Literal[1, 2] = 1
    channels: int = Field(gt=0)

    @model_validator(mode="after")
    def _stride_only_on_sc(self):
        if self.kind == "SSC" and self.stride != 1:
            raise ValueError("SSC blocks cannot be strided")
        return self


def _blocks(*groups: Tuple[str, int, int], channels: int) -> List[SpfeBlock]:
    blocks = []
    for kind, stride, count in groups:
        blocks += [SpfeBlock(kind=kind, stride=stride, channels=channels) for _ in range(count)]
    return blocks


class SpfeConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    dims: Literal[2, 3] = 2
    blocks: Tuple[SpfeBlock, ...] = ()
    kernel_extent: int = 3

    @property
    def total_stride(self) -> int:
        total = 1
        for block in self.blocks:
            total *= block.stride
        return total

    @property
    def out_channels(self) -> Optional[int]:
        return self.blocks[-1].channels if self.blocks else None

    @classmethod
    def preset(cls, name: str) -> "SpfeConfig":
        try:
            return SPFE_PRESETS[name]
        except KeyError:
            raise ValueError(f"Unknown SPFE preset {name!r}; choose from {sorted(SPFE_PRESETS)}") from None


SPFE_PRESETS: Dict[str, SpfeConfig] = {
    "CarS": SpfeConfig(dims=2, blocks=_blocks(("SSC", 1, 4), ("SC", 2, 1), ("SSC", 1, 2), channels=96)),
    "CarL": SpfeConfig(dims=2, blocks=_blocks(("SSC", 1, 6), ("SC", 2, 1), ("SSC", 1, 4), channels=96)),
    "PedS": SpfeConfig(dims=2, blocks=_blocks(("SSC", 1, 4), ("SC", 1, 1), ("SSC", 1, 2), channels=96)),
    "PedL": SpfeConfig(dims=2, blocks=_blocks(("SSC", 1, 6), ("SC", 1, 1), ("SSC", 1, 4), channels=96)),
    "CarXL": SpfeConfig(dims=3, blocks=_blocks(("SSC", 1, 4), ("SC", 2, 1), ("SSC", 1, 4), channels=64)),
}


def spfe_layer_specs(config: SpfeConfig, in_channels: int) -> Dict[str, Tuple[int, ...]]:
    specs: Dict[str, Tuple[int, ...]] = {}
    volume = config.kernel_extent ** config.dims
    c_in = in_channels
    for i, block in enumerate(config.blocks):
        specs[f"spfe.block{i}.weight"] = (volume, c_in, block.channels)
        specs[f"spfe.block{i}.bias"] = (block.channels,)
        c_in = block.channels
    return specs


@dataclass(frozen=True)
class BlockStats:
    index: int
    kind: str
    stride: int
    in_sites: int
    out_sites: int
    pairs: int


def trace_spfe(input: SparseTensor, config: SpfeConfig,
               weights: Mapping[str, np.ndarray]) -> Tuple[SparseTensor, List[BlockStats]]:
    """Run the SPFE blocks (conv + ReLU each) and report per-block site and pair counts."""
    if input.dims != config.dims:
        raise ValueError(f"SPFE config is {config.dims}D but the input tensor is {input.dims}D")
    x = input
    stats: List[BlockStats] = []
    for i, block in enumerate(config.blocks):
        try:
            w = weights[f"spfe.block{i}.weight"]
            b = weights[f"spfe.block{i}.bias"]
        except KeyError as exc:
            raise ValueError(f"Missing SPFE weights for block {i}: {exc}") from exc
        if w.shape[2] != block.channels:
            raise ValueError(f"Block {i} weights emit {w.shape[2]} channels, config says {block.channels}")
        if block.kind == "SSC":
            rulebook = build_rulebook_ssc(x, config.kernel_extent)
        else:
            rulebook = build_rulebook_sc(x, config.kernel_extent, block.stride)
        y = sparse_conv_forward(x, w, rulebook, b)
        y = y.with_features(np.maximum(y.features, 0.0))
        stats.append(BlockStats(i, block.kind, block.stride, x.num_sites, y.num_sites, rulebook.total_pairs))
        logger.debug("spfe block %d %s/%d: %d -> %d sites, %d pairs",
                     i, block.kind, block.stride, x.num_sites, y.num_sites, rulebook.total_pairs)
        x = y
    return x, stats


def run_spfe(input: SparseTensor, config: SpfeConfig, weights: Mapping[str, np.ndarray]) -> SparseTensor:
    output, _ = trace_spfe(input, config, weights)
    return output
