"""Fusion head: combine the two branch features, classify, score the loss.

The image feature vector and the text feature vector are concatenated
(image block first) and pushed through three fully-connected layers into a
2-way softmax. Single-modality variants reuse the same head on one branch,
which is how the image-only and text-only baselines are trained.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import (Tensor, ShapeError, bias_add, concat, matmul, relu,
                       softmax_cross_entropy, stable_softmax)
from .image import (ConvStackConfig, ConvLayerSpec, ImageBranchParams,
                    encode_image, image_preset, init_image_params, preprocess_image)
from .text import (EmbeddingTable, TextBranchParams, TextConfig, embed_sentence,
                   encode_sentence_matrix, init_text_params, text_preset, tokenize)

MODALITIES = ("fused", "image", "text")

NUM_CLASSES = 2


@dataclass(frozen=True)
class FusionConfig:
    """Everything needed to rebuild a model's parameter shapes."""

    image: Optional[ConvStackConfig]
    text: Optional[TextConfig]
    hidden1: int = 256
    hidden2: int = 64
    modality: str = "fused"
    dtype: str = "float32"

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.modality in ("fused", "image") and self.image is None:
            raise ValueError(f"modality {self.modality!r} needs an image branch config")
        if self.modality in ("fused", "text") and self.text is None:
            raise ValueError(f"modality {self.modality!r} needs a text branch config")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.hidden1 < 1 or self.hidden2 < 1:
            raise ValueError("hidden widths must be positive")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def fused_size(self) -> int:
        size = 0
        if self.modality in ("fused", "image"):
            size += self.image.feature_size
        if self.modality in ("fused", "text"):
            size += self.text.feature_size
        return size


def fusion_preset(name: str, modality: str = "fused", dtype: str = "float32") -> FusionConfig:
    """Named model scales: "full" (224px, 100 filters, 256/64 head) or "tiny"."""
    if name == "full":
        return FusionConfig(image=image_preset("full"), text=text_preset("full"),
                            hidden1=256, hidden2=64, modality=modality, dtype=dtype)
    if name == "tiny":
        return FusionConfig(image=image_preset("tiny"), text=text_preset("tiny"),
                            hidden1=16, hidden2=8, modality=modality, dtype=dtype)
    raise ValueError(f"unknown preset {name!r} (have 'full', 'tiny')")


@dataclass
class FusionModelParams:
    """All learnable tensors of a model plus the config that shaped them."""

    config: FusionConfig
    image_params: Optional[ImageBranchParams]
    text_params: Optional[TextBranchParams]
    fc_weights: list[Tensor] = field(default_factory=list)
    fc_biases: list[Tensor] = field(default_factory=list)

    def named_tensors(self) -> dict[str, Tensor]:
        """Stable name -> tensor map; iteration order is the checkpoint order."""
        out: dict[str, Tensor] = {}
        if self.image_params is not None:
            out.update(self.image_params.named_tensors())
        if self.text_params is not None:
            out.update(self.text_params.named_tensors())
        for i, (w, b) in enumerate(zip(self.fc_weights, self.fc_biases), start=1):
            out[f"fc{i}.weight"] = w
            out[f"fc{i}.bias"] = b
        return out

    def tensors(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def zero_grads(self) -> None:
        for t in self.tensors():
            t.zero_grad()

    def all_finite(self) -> bool:
        return all(np.isfinite(t.values).all() for t in self.tensors())


def init_model(config: FusionConfig, seed: int = 0) -> FusionModelParams:
    """Uniform [-a, a] weights with a = sqrt(6 / (fan_in + fan_out)), zero biases."""
    rng = np.random.default_rng(seed)
    dtype = config.np_dtype
    image_params = None
    text_params = None
    if config.modality in ("fused", "image"):
        image_params = init_image_params(config.image, rng, dtype)
    if config.modality in ("fused", "text"):
        text_params = init_text_params(config.text, rng, dtype)
    widths = [config.fused_size, config.hidden1, config.hidden2, NUM_CLASSES]
    fc_w, fc_b = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        fc_w.append(Tensor(w.astype(dtype), requires_grad=True))
        fc_b.append(Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True))
    return FusionModelParams(config=config, image_params=image_params,
                             text_params=text_params, fc_weights=fc_w, fc_biases=fc_b)


def empty_model(config: FusionConfig) -> FusionModelParams:
    """Same parameter structure as ``init_model`` but all zeros (loader target)."""
    params = init_model(config, seed=0)
    for t in params.tensors():
        t.values[...] = 0
    return params


def fuse(x_i: Tensor, x_t: Tensor) -> Tensor:
    """Concatenate the image feature block before the text feature block."""
    if x_i.ndim != 1 or x_t.ndim != 1:
        raise ShapeError(f"fuse needs 1-D features, got {x_i.shape} and {x_t.shape}")
    if x_i.shape[0] == 0 or x_t.shape[0] == 0:
        raise ShapeError("fuse: both modalities are mandatory, got an empty feature vector")
    return concat([x_i, x_t], axis=0)


def head_logits(x: Tensor, params: FusionModelParams) -> Tensor:
    """Three fully-connected layers with ReLU between; returns the 2 raw logits."""
    if x.ndim != 1:
        raise ShapeError(f"head input must be 1-D, got {x.shape}")
    h = x.reshape(1, -1)
    last = len(params.fc_weights) - 1
    for i, (w, b) in enumerate(zip(params.fc_weights, params.fc_biases)):
        h = bias_add(matmul(h, w), b)
        if i < last:
            h = relu(h)
    return h.reshape(-1)


def forward(x: Tensor, params: FusionModelParams) -> np.ndarray:
    """Class distribution [p_neg, p_pos] for an already-fused feature vector."""
    return stable_softmax(head_logits(x, params).values)


@dataclass
class ModelSample:
    """One training/evaluation item, already decoded and tokenized."""

    image: Optional[np.ndarray]  # (3, S, S), preprocessed
    tokens: Optional[list[str]]
    label: int
    id: str = ""


def encode_inputs(image, tokens, params: FusionModelParams,
                  table: Optional[EmbeddingTable]) -> Tensor:
    """Branch features for whatever modalities the model uses, fused if both."""
    cfg = params.config
    x_i = None
    x_t = None
    if cfg.modality in ("fused", "image"):
        if image is None:
            raise ValueError("model needs an image input")
        x_i = encode_image(image, params.image_params, cfg.image)
    if cfg.modality in ("fused", "text"):
        if tokens is None:
            raise ValueError("model needs a text input")
        if table is None:
            raise ValueError("text encoding needs an embedding table")
        sm = embed_sentence(tokens, table, cfg.text.max_len)
        x_t = encode_sentence_matrix(sm, params.text_params)
    if cfg.modality == "fused":
        return fuse(x_i, x_t)
    return x_i if cfg.modality == "image" else x_t


def sample_loss(sample: ModelSample, params: FusionModelParams,
                table: Optional[EmbeddingTable]) -> Tensor:
    """Cross-entropy of the full pipeline on one sample."""
    if sample.label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {sample.label}")
    x = encode_inputs(sample.image, sample.tokens, params, table)
    logits = head_logits(x, params)
    return softmax_cross_entropy(logits, sample.label)


def batch_loss(batch: Sequence[ModelSample], params: FusionModelParams,
               table: Optional[EmbeddingTable]) -> Tensor:
    """Arithmetic mean of the per-sample losses."""
    if len(batch) == 0:
        raise ValueError("batch_loss of an empty batch")
    losses = [sample_loss(s, params, table).reshape(1) for s in batch]
    return concat(losses, axis=0).mean() if len(losses) > 1 else losses[0].reshape(())


@dataclass
class Prediction:
    label: int
    p_neg: float
    p_pos: float


def predict(image, text, params: FusionModelParams,
            table: Optional[EmbeddingTable]) -> Prediction:
    """Classify one raw (H, W, 3) image / text pair; ties go to label 0.

    ``image`` is decoded pixels (preprocessing happens here); ``text`` may be
    a raw string or a token list. Inputs the model's modality ignores may be
    None.
    """
    cfg = params.config
    img = None
    if cfg.modality in ("fused", "image"):
        img = preprocess_image(image, cfg.image.input_side, dtype=cfg.np_dtype)
    tokens = None
    if cfg.modality in ("fused", "text"):
        tokens = tokenize(text) if isinstance(text, str) else list(text)
    x = encode_inputs(img, tokens, params, table)
    probs = forward(x, params)
    label = 0 if probs[0] >= probs[1] else 1
    return Prediction(label=label, p_neg=float(probs[0]), p_pos=float(probs[1]))


# -- config (de)serialization for checkpoints --------------------------------


def config_to_dict(config: FusionConfig) -> dict:
    d: dict = {"modality": config.modality, "dtype": config.dtype,
               "hidden1": config.hidden1, "hidden2": config.hidden2}
    if config.image is not None:
        d["image"] = {
            "input_side": config.image.input_side,
            "in_channels": config.image.in_channels,
            "preset": config.image.preset,
            "layers": [
                {"out_channels": s.out_channels, "kernel": s.kernel, "stride": s.stride,
                 "pad": s.pad, "has_lrn": s.has_lrn, "pool_window": s.pool_window,
                 "pool_stride": s.pool_stride}
                for s in config.image.layers
            ],
        }
    if config.text is not None:
        d["text"] = {
            "dim": config.text.dim, "max_len": config.text.max_len,
            "widths": list(config.text.widths),
            "filters_per_width": config.text.filters_per_width,
            "nonlinearity": config.text.nonlinearity,
        }
    return d


def config_from_dict(d: dict) -> FusionConfig:
    image = None
    if "image" in d:
        img = d["image"]
        image = ConvStackConfig(
            layers=tuple(ConvLayerSpec(**layer) for layer in img["layers"]),
            input_side=img["input_side"], in_channels=img["in_channels"],
            preset=img.get("preset", "custom"))
    text = None
    if "text" in d:
        tx = d["text"]
        text = TextConfig(dim=tx["dim"], max_len=tx["max_len"], widths=tuple(tx["widths"]),
                          filters_per_width=tx["filters_per_width"],
                          nonlinearity=tx["nonlinearity"])
    return FusionConfig(image=image, text=text, hidden1=d["hidden1"], hidden2=d["hidden2"],
                        modality=d["modality"], dtype=d["dtype"])
