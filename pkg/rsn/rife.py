# rsn/rife.py
"""
Range image feature extraction: dense 2D convolutions with azimuthal
(circular) horizontal padding, resnet blocks and the down/up U-Net that
emits per-pixel segmentation logits and features at full resolution.

Weights are a flat mapping ``name -> ndarray`` where every convolution
``<layer>`` owns ``<layer>.kernel`` (kh, kw, in, out) and ``<layer>.bias``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .core import DenseTensor


# -------------------------
# Layers
# -------------------------

@dataclass(frozen=True)
class Conv2DLayer:
    kernel: np.ndarray
    bias: np.ndarray
    stride: int = 1

    def __post_init__(self):
        kernel = np.asarray(self.kernel, dtype=np.float64)
        bias = np.asarray(self.bias, dtype=np.float64)
        if kernel.ndim != 4:
            raise ValueError(f"Conv kernel must be (kh, kw, in, out), got shape {kernel.shape}")
        kh, kw = kernel.shape[:2]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"Conv kernel extents must be odd, got {kh}x{kw}")
        if bias.shape != (kernel.shape[3],):
            raise ValueError(f"Conv bias shape {bias.shape} does not match {kernel.shape[3]} output channels")
        if self.stride not in (1, 2):
            raise ValueError(f"Conv stride must be 1 or 2, got {self.stride}")
        if not (np.all(np.isfinite(kernel)) and np.all(np.isfinite(bias))):
            raise ValueError("Conv weights must be finite")
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "bias", bias)

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[2]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[3]


def _same_padding(size: int, extent: int, stride: int) -> Tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + extent - size, 0)
    return out, total // 2, total - total // 2


def conv2d_forward(input: DenseTensor, layer: Conv2DLayer) -> DenseTensor:
    """SAME cross-correlation; columns wrap around, rows are zero padded."""
    x = input.data
    if x.ndim != 3:
        raise ValueError(f"conv2d_forward expects an (H, W, C) tensor, got shape {x.shape}")
    if x.shape[2] != layer.in_channels:
        raise ValueError(f"Input has {x.shape[2]} channels, layer expects {layer.in_channels}")

    kh, kw = layer.kernel.shape[:2]
    s = layer.stride
    out_h, top, bottom = _same_padding(x.shape[0], kh, s)
    out_w, left, right = _same_padding(x.shape[1], kw, s)
    padded = np.pad(x, ((top, bottom), (0, 0), (0, 0)), mode="constant")
    padded = np.pad(padded, ((0, 0), (left, right), (0, 0)), mode="wrap")

    out = np.broadcast_to(layer.bias, (out_h, out_w, layer.out_channels)).copy()
    for dy in range(kh):
        for dx in range(kw):
            patch = padded[dy:dy + s * (out_h - 1) + 1:s, dx:dx + s * (out_w - 1) + 1:s, :]
            out += patch @ layer.kernel[dy, dx]
    return DenseTensor(out)


def relu(t: DenseTensor) -> DenseTensor:
    return DenseTensor(np.maximum(t.data, 0.0))


def concat_channels(a: DenseTensor, b: DenseTensor) -> DenseTensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise ValueError(f"Cannot concatenate tensors of shapes {a.shape} and {b.shape}")
    return DenseTensor(np.concatenate([a.data, b.data], axis=-1))


def _upsample_axis(x: np.ndarray, axis: int, wrap: bool) -> np.ndarray:
    x = np.moveaxis(x, axis, 0)
    if wrap:
        prev, nxt = np.roll(x, 1, axis=0), np.roll(x, -1, axis=0)
    else:
        prev = np.concatenate([x[:1], x[:-1]], axis=0)
        nxt = np.concatenate([x[1:], x[-1:]], axis=0)
    out = np.empty((2 * x.shape[0],) + x.shape[1:])
    out[0::2] = 0.75 * x + 0.25 * prev
    out[1::2] = 0.75 * x + 0.25 * nxt
    return np.moveaxis(out, 0, axis)


def bilinear_upsample_2x(input: DenseTensor, horizontal_wrap: bool = False) -> DenseTensor:
    """2x bilinear upsampling, align_corners=False; edges clamp unless wrapped."""
    x = input.data
    if x.ndim != 3:
        raise ValueError(f"bilinear_upsample_2x expects an (H, W, C) tensor, got shape {x.shape}")
    x = _upsample_axis(x, 0, wrap=False)
    x = _upsample_axis(x, 1, wrap=horizontal_wrap)
    return DenseTensor(x)


# -------------------------
# Resnet blocks
# -------------------------

@dataclass(frozen=True)
class ResnetWeights:
    conv1: Conv2DLayer
    conv2: Conv2DLayer
    projection: Optional[Conv2DLayer] = None


def _with_stride(layer: Conv2DLayer, stride: int) -> Conv2DLayer:
    return layer if layer.stride == stride else Conv2DLayer(layer.kernel, layer.bias, stride)


def resnet_block(input: DenseTensor, weights: ResnetWeights, stride: int = 1) -> DenseTensor:
    if stride not in (1, 2):
        raise ValueError(f"Resnet stride must be 1 or 2, got {stride}")
    residual = relu(conv2d_forward(input, _with_stride(weights.conv1, stride)))
    residual = conv2d_forward(residual, _with_stride(weights.conv2, 1))

    needs_projection = stride != 1 or input.channels != weights.conv2.out_channels
    if weights.projection is not None:
        skip = conv2d_forward(input, _with_stride(weights.projection, stride))
    elif needs_projection:
        raise ValueError(
            f"Resnet block with stride {stride} and {input.channels}->{weights.conv2.out_channels} "
            "channels requires a projection"
        )
    else:
        skip = input
    if skip.shape != residual.shape:
        raise ValueError(f"Skip shape {skip.shape} does not match residual shape {residual.shape}")
    return DenseTensor(np.maximum(residual.data + skip.data, 0.0))


# -------------------------
# U-Net
# -------------------------

BlockSpec = Tuple[int, int]


class UNetConfig(BaseModel):
    """
    D blocks each halve the resolution; U blocks upsample back level by
    level. The feature head performs the last upsampling stage, so there is
    one U block fewer than D blocks.
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    down_blocks: Tuple[BlockSpec, ...] = ((1, 16), (2, 32), (2, 64))
    up_blocks: Tuple[BlockSpec, ...] = ((2, 32), (2, 16))
    feature_channels: int = 16
    in_channels: int = 3

    @field_validator("down_blocks", "up_blocks")
    @classmethod
    def _positive_blocks(cls, v, info):
        for count, channels in v:
            if count < 1 or channels < 1:
                raise ValueError(f"{info.field_name} entries must be positive (L, C), got {(count, channels)}")
        return v

    @field_validator("feature_channels", "in_channels")
    @classmethod
    def _positive(cls, v, info):
        if v < 1:
            raise ValueError(f"{info.field_name} must be positive, got {v}")
        return v

    @model_validator(mode="after")
    def _stages(self):
        if not self.down_blocks:
            raise ValueError("UNetConfig needs at least one down block")
        if len(self.up_blocks) != len(self.down_blocks) - 1:
            raise ValueError(
                f"Expected {len(self.down_blocks) - 1} up blocks for {len(self.down_blocks)} down blocks "
                f"(the feature head is the final upsampling stage), got {len(self.up_blocks)}"
            )
        return self

    @property
    def total_stride(self) -> int:
        return 2 ** len(self.down_blocks)


@dataclass(frozen=True)
class RifeOutput:
    seg_logits: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        if self.seg_logits.shape != self.features.shape[:2]:
            raise ValueError(
                f"seg_logits shape {self.seg_logits.shape} does not match features {self.features.shape}"
            )


def _resnet_specs(prefix: str, count: int, in_ch: int, out_ch: int) -> Dict[str, Tuple[int, int, int, int]]:
    specs = {}
    for j in range(count):
        cin = in_ch if j == 0 else out_ch
        specs[f"{prefix}.res{j}.conv1"] = (3, 3, cin, out_ch)
        specs[f"{prefix}.res{j}.conv2"] = (3, 3, out_ch, out_ch)
        if j == 0:
            specs[f"{prefix}.res{j}.proj"] = (1, 1, cin, out_ch)
    return specs


def unet_layer_specs(config: UNetConfig) -> Dict[str, Tuple[int, int, int, int]]:
    """Kernel shape of every convolution, keyed by layer name."""
    specs: Dict[str, Tuple[int, int, int, int]] = {}
    channels = [config.in_channels]
    for i, (count, out_ch) in enumerate(config.down_blocks):
        specs.update(_resnet_specs(f"unet.down{i}", count, channels[-1], out_ch))
        channels.append(out_ch)

    current = channels[-1]
    depth = len(config.down_blocks)
    for i, (count, out_ch) in enumerate(config.up_blocks):
        skip_ch = channels[depth - 1 - i]
        specs[f"unet.up{i}.reduce"] = (1, 1, current, out_ch)
        specs.update(_resnet_specs(f"unet.up{i}", count, out_ch + skip_ch, out_ch))
        current = out_ch

    f = config.feature_channels
    specs["unet.head.reduce"] = (1, 1, current, f)
    specs["unet.head.out"] = (1, 1, f + config.in_channels, 1 + f)
    return specs


def _conv(weights: Mapping[str, np.ndarray], name: str, stride: int = 1) -> Conv2DLayer:
    try:
        return Conv2DLayer(weights[f"{name}.kernel"], weights[f"{name}.bias"], stride)
    except KeyError as exc:
        raise ValueError(f"Missing weight tensor for layer {name!r}: {exc}") from exc


def _resnet_weights(weights: Mapping[str, np.ndarray], prefix: str) -> ResnetWeights:
    projection = _conv(weights, f"{prefix}.proj") if f"{prefix}.proj.kernel" in weights else None
    return ResnetWeights(_conv(weights, f"{prefix}.conv1"), _conv(weights, f"{prefix}.conv2"), projection)


def unet_forward(image: DenseTensor, config: UNetConfig, weights: Mapping[str, np.ndarray]) -> RifeOutput:
    if image.data.ndim != 3 or image.channels != config.in_channels:
        raise ValueError(f"Expected an (H, W, {config.in_channels}) image, got shape {image.shape}")
    stride = config.total_stride
    if image.height % stride or image.width % stride:
        raise ValueError(f"Image size {image.height}x{image.width} is not divisible by the U-Net stride {stride}")
    for name, shape in unet_layer_specs(config).items():
        kernel = weights.get(f"{name}.kernel")
        if kernel is not None and tuple(kernel.shape) != shape:
            raise ValueError(f"Weight {name}.kernel has shape {tuple(kernel.shape)}, expected {shape}")

    x = image
    skips = [image]
    for i, (count, _) in enumerate(config.down_blocks):
        for j in range(count):
            x = resnet_block(x, _resnet_weights(weights, f"unet.down{i}.res{j}"), stride=2 if j == 0 else 1)
        skips.append(x)

    depth = len(config.down_blocks)
    for i, (count, _) in enumerate(config.up_blocks):
        x = conv2d_forward(x, _conv(weights, f"unet.up{i}.reduce"))
        x = bilinear_upsample_2x(x, horizontal_wrap=True)
        x = concat_channels(x, skips[depth - 1 - i])
        for j in range(count):
            x = resnet_block(x, _resnet_weights(weights, f"unet.up{i}.res{j}"), stride=1)

    x = conv2d_forward(x, _conv(weights, "unet.head.reduce"))
    x = bilinear_upsample_2x(x, horizontal_wrap=True)
    x = concat_channels(x, skips[0])
    out = conv2d_forward(x, _conv(weights, "unet.head.out")).data
    return RifeOutput(seg_logits=out[..., 0].copy(), features=out[..., 1:].copy())
