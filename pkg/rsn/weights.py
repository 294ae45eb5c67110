# rsn/weights.py
"""
Named weight tensors: seeded fan-in initialization and the "RSNW"
little-endian checkpoint.

File layout: magic "RSNW", then per tensor a u32 name length, the UTF-8
name, a u32 rank, rank x u32 dims and the f32 data in C order, until EOF.
"""
from __future__ import annotations

import logging
import math
from pathlib import Path
import struct
from typing import Dict, Mapping, Tuple, Union

import numpy as np

from .core import Rng

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RSNW"

Weights = Dict[str, np.ndarray]


def fan_in(name: str, specs: Mapping[str, Tuple[int, ...]]) -> int:
    """Fan-in of a weight tensor; biases borrow the fan-in of their layer's weight."""
    shape = specs[name]
    if name.endswith(".bias"):
        stem = name[: -len(".bias")]
        for sibling in (f"{stem}.kernel", f"{stem}.weight"):
            if sibling in specs:
                return fan_in(sibling, specs)
        return shape[0]
    if len(shape) == 4:
        kh, kw, cin, _ = shape
        return kh * kw * cin
    if len(shape) == 3:
        volume, cin, _ = shape
        return volume * cin
    return shape[0]


def init_from_specs(specs: Mapping[str, Tuple[int, ...]], rng: Rng) -> Weights:
    """
    U(-1/sqrt(fan_in), 1/sqrt(fan_in)) per tensor from a keyed child stream;
    layer-norm gains start at 1 and norm biases at 0. Values are rounded
    to float32 so a saved checkpoint reloads bit-identically.
    """
    weights: Weights = {}
    for i, name in enumerate(sorted(specs)):
        shape = tuple(specs[name])
        if name.endswith(".norm.gain"):
            values = np.ones(shape)
        elif name.endswith(".norm.bias"):
            values = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(max(fan_in(name, specs), 1))
            values = rng.child(i).uniform(-bound, bound, size=shape)
        weights[name] = values.astype(np.float32).astype(np.float64)
    return weights


def init_weights(run_config, rng: Rng) -> Weights:
    """Every tensor the run configuration's network needs."""
    weights = init_from_specs(run_config.layer_specs(), rng)
    logger.debug("initialized %d tensors (%d values)", len(weights), sum(w.size for w in weights.values()))
    return weights


def check_weights(weights: Mapping[str, np.ndarray], specs: Mapping[str, Tuple[int, ...]]) -> None:
    missing = sorted(set(specs) - set(weights))
    if missing:
        raise ValueError(f"Checkpoint is missing tensors: {', '.join(missing[:5])}"
                         + (f" (+{len(missing) - 5} more)" if len(missing) > 5 else ""))
    for name, shape in specs.items():
        if tuple(weights[name].shape) != tuple(shape):
            raise ValueError(f"Tensor {name} has shape {tuple(weights[name].shape)}, expected {tuple(shape)}")


def save_checkpoint(path: Union[str, Path], weights: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name in sorted(weights):
            tensor = np.asarray(weights[name])
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    logger.info("Wrote %d tensors to %s", len(weights), path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Weights:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not an RSNW checkpoint (magic {data[:4]!r})")
    offset = 4
    weights: Weights = {}

    def take(size: int) -> bytes:
        nonlocal offset
        if offset + size > len(data):
            raise ValueError(f"Truncated checkpoint {path} at byte {offset}")
        chunk = data[offset:offset + size]
        offset += size
        return chunk

    while offset < len(data):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        weights[name] = values.astype(np.float64)
    return weights
