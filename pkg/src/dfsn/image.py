"""Image branch: raw RGB pixels to the visual sentiment representation.

A five-layer convolution stack (conv, ReLU, optional cross-channel
normalization, optional max pooling per layer) ends in a max pooling layer
whose flattened output is the image feature vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, ShapeError, conv2d, lrn, maxpool2d, relu

DEFAULT_CHANNEL_MEAN = (0.5, 0.5, 0.5)

LRN_DEPTH_RADIUS = 2
LRN_K = 2.0
LRN_ALPHA = 1e-4
LRN_BETA = 0.75


@dataclass(frozen=True)
class ConvLayerSpec:
    """One stack layer: convolution geometry plus its optional tail layers."""

    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0
    has_lrn: bool = False
    pool_window: Optional[int] = None
    pool_stride: Optional[int] = None

    @property
    def has_pool(self) -> bool:
        return self.pool_window is not None


@dataclass(frozen=True)
class ConvStackConfig:
    """Geometry of the five-layer stack and its input side length."""

    layers: tuple[ConvLayerSpec, ...]
    input_side: int = 224
    in_channels: int = 3
    preset: str = "custom"

    def __post_init__(self):
        if len(self.layers) != 5:
            raise ValueError(f"the stack has exactly 5 convolutional layers, got {len(self.layers)}")
        if not self.layers[-1].has_pool:
            raise ValueError("the final layer must end in max pooling; its output is the feature")

    def layer_shapes(self) -> list[tuple[int, int, int]]:
        """(channels, height, width) after each full layer, input excluded."""
        c, h, w = self.in_channels, self.input_side, self.input_side
        shapes = []
        for i, spec in enumerate(self.layers):
            h = (h + 2 * spec.pad - spec.kernel) // spec.stride + 1
            w = (w + 2 * spec.pad - spec.kernel) // spec.stride + 1
            c = spec.out_channels
            if h < 1 or w < 1:
                raise ValueError(f"layer {i + 1} collapses the spatial extent to {h}x{w}")
            if spec.has_pool:
                h = (h - spec.pool_window) // spec.pool_stride + 1
                w = (w - spec.pool_window) // spec.pool_stride + 1
            shapes.append((c, h, w))
        return shapes

    @property
    def feature_size(self) -> int:
        c, h, w = self.layer_shapes()[-1]
        return c * h * w


# The "full" stack mirrors the classic 5-layer configuration: 96/256/384/384/256
# channels, 11/5/3/3/3 kernels, stride 4 then 1, LRN after layers 1-2, pooling
# after layers 1, 2, 5. Feature size at 224x224 input: 256*6*6 = 9216.
# The "tiny" stack (16x16 input, feature size 8*2*2 = 32) keeps the same
# LRN/pool placement and is the default for tests and desk-scale experiments.
IMAGE_PRESETS = {
    "full": ConvStackConfig(
        layers=(
            ConvLayerSpec(96, 11, stride=4, pad=2, has_lrn=True, pool_window=3, pool_stride=2),
            ConvLayerSpec(256, 5, stride=1, pad=2, has_lrn=True, pool_window=3, pool_stride=2),
            ConvLayerSpec(384, 3, stride=1, pad=1),
            ConvLayerSpec(384, 3, stride=1, pad=1),
            ConvLayerSpec(256, 3, stride=1, pad=1, pool_window=3, pool_stride=2),
        ),
        input_side=224,
        preset="full",
    ),
    "tiny": ConvStackConfig(
        layers=(
            ConvLayerSpec(4, 3, stride=1, pad=1, has_lrn=True, pool_window=2, pool_stride=2),
            ConvLayerSpec(4, 3, stride=1, pad=1, has_lrn=True, pool_window=2, pool_stride=2),
            ConvLayerSpec(8, 3, stride=1, pad=1),
            ConvLayerSpec(8, 3, stride=1, pad=1),
            ConvLayerSpec(8, 3, stride=1, pad=1, pool_window=2, pool_stride=2),
        ),
        input_side=16,
        preset="tiny",
    ),
}


def image_preset(name: str) -> ConvStackConfig:
    try:
        return IMAGE_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown image preset {name!r} (have {sorted(IMAGE_PRESETS)})") from None


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an (H, W, C) float array with half-pixel-centered bilinear sampling.

    Source coordinates are (dst + 0.5) * in/out - 0.5, clamped to the image;
    a same-size resize is therefore the identity.
    """
    if img.ndim != 3:
        raise ShapeError(f"bilinear_resize expects (H, W, C), got {img.shape}")
    h, w, _ = img.shape
    if h < 1 or w < 1 or out_h < 1 or out_w < 1:
        raise ValueError("bilinear_resize: empty image or empty target")

    def axis_coords(n_in: int, n_out: int):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    y0, y1, fy = axis_coords(h, out_h)
    x0, x1, fx = axis_coords(w, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def preprocess_image(raw: np.ndarray, side: int = 224,
                     channel_mean: Sequence[float] = DEFAULT_CHANNEL_MEAN,
                     dtype=np.float64) -> np.ndarray:
    """Decoded (H, W, 3) pixels to a centered (3, side, side) float tensor.

    Pixels are scaled to [0, 1] (dividing by 255 when the input is integer),
    bilinearly resized, then shifted by the per-channel dataset mean.
    """
    arr = np.asarray(raw)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) pixels, got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError("empty image")
    scaled = arr.astype(np.float64)
    if np.issubdtype(arr.dtype, np.integer):
        scaled = scaled / 255.0
    resized = bilinear_resize(scaled, side, side)
    mean = np.asarray(channel_mean, dtype=np.float64)
    if mean.shape != (3,):
        raise ValueError(f"channel_mean must have 3 entries, got {mean.shape}")
    centered = resized - mean[None, None, :]
    return centered.transpose(2, 0, 1).astype(dtype)


@dataclass
class ImageBranchParams:
    """Learnable kernels and biases, one pair per stack layer."""

    config: ConvStackConfig
    kernels: list[Tensor]
    biases: list[Tensor]

    def named_tensors(self, prefix: str = "image") -> dict[str, Tensor]:
        out = {}
        for i, (k, b) in enumerate(zip(self.kernels, self.biases), start=1):
            out[f"{prefix}.conv{i}.weight"] = k
            out[f"{prefix}.conv{i}.bias"] = b
        return out


def init_image_params(config: ConvStackConfig, rng: np.random.Generator,
                      dtype=np.float32) -> ImageBranchParams:
    """Symmetric uniform init for kernels, zero biases."""
    kernels, biases = [], []
    c_in = config.in_channels
    for spec in config.layers:
        k = spec.kernel
        fan_in = c_in * k * k
        fan_out = spec.out_channels * k * k
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(spec.out_channels, c_in, k, k))
        kernels.append(Tensor(w.astype(dtype), requires_grad=True))
        biases.append(Tensor(np.zeros(spec.out_channels, dtype=dtype), requires_grad=True))
        c_in = spec.out_channels
    return ImageBranchParams(config=config, kernels=kernels, biases=biases)


def encode_image(img, params: ImageBranchParams, config: Optional[ConvStackConfig] = None) -> Tensor:
    """Run the stack and flatten the final pooling output to one dimension.

    ``img`` is a (3, S, S) array or tensor. Shape mismatches raise with the
    offending layer named.
    """
    cfg = config or params.config
    x = img if isinstance(img, Tensor) else Tensor(img)
    if x.shape != (cfg.in_channels, cfg.input_side, cfg.input_side):
        raise ShapeError(
            f"input shape {x.shape} != expected "
            f"({cfg.in_channels}, {cfg.input_side}, {cfg.input_side})")
    c_in = cfg.in_channels
    for i, spec in enumerate(cfg.layers, start=1):
        kern = params.kernels[i - 1]
        expected = (spec.out_channels, c_in, spec.kernel, spec.kernel)
        if kern.shape != expected:
            raise ShapeError(f"layer {i}: kernel shape {kern.shape} != {expected}")
        try:
            x = conv2d(x, kern, params.biases[i - 1], stride=spec.stride, pad=spec.pad)
            x = relu(x)
            if spec.has_lrn:
                x = lrn(x, LRN_DEPTH_RADIUS, LRN_K, LRN_ALPHA, LRN_BETA)
            if spec.has_pool:
                x = maxpool2d(x, spec.pool_window, spec.pool_stride)
        except ShapeError as exc:
            raise ShapeError(f"layer {i}: {exc}") from None
        c_in = spec.out_channels
    return x.flatten()


def encoded_image_size(config: ConvStackConfig) -> int:
    return config.feature_size
