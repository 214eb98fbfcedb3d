"""Text branch: tokens to the textual sentiment representation.

A sentence becomes a fixed-size matrix of static word vectors, windowed
filters slide over it at several widths, and each filter's feature map is
pooled into [max, mean, min]. The concatenation of those pooled triples is
the text feature vector.
"""

from __future__ import annotations

import hashlib
import string
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, ShapeError, bias_add, concat, matmul, relu, tanh_op
from .autodiff import triple_pool, triple_pool_columns  # noqa: F401  (re-exported API)

DEFAULT_DIM = 200
DEFAULT_MAX_LEN = 150
DEFAULT_WIDTHS = (3, 4, 5)
OOV_SCALE = 0.25

_STRIP_CHARS = string.punctuation + "‘’“”"


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip surrounding punctuation.

    Tokens that are empty after stripping are dropped, so punctuation-only
    chunks disappear.
    """
    tokens = []
    for raw in text.lower().split():
        tok = raw.strip(_STRIP_CHARS)
        if tok:
            tokens.append(tok)
    return tokens


def oov_vector(word: str, dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic vector for a word missing from the table.

    The word bytes and the seed are hashed (stable across runs and platforms)
    into a PRNG stream that draws uniformly from [-0.25, 0.25].
    """
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=16,
                             key=str(seed).encode("utf-8")).digest()
    entropy = int.from_bytes(digest, "little")
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
    return gen.uniform(-OOV_SCALE, OOV_SCALE, size=dim)


class EmbeddingTable:
    """Word to k-vector map with a deterministic out-of-vocabulary fallback.

    Vectors are frozen: nothing here ever receives a gradient. The padding
    vector is all zeros, neutral under the dot products the filters take.
    """

    def __init__(self, dim: int = DEFAULT_DIM, vectors: Optional[dict[str, np.ndarray]] = None,
                 fallback_seed: int = 0):
        if dim < 1:
            raise ValueError(f"embedding dimension must be positive, got {dim}")
        self.dim = dim
        self.vectors: dict[str, np.ndarray] = {}
        if vectors:
            for word, vec in vectors.items():
                arr = np.asarray(vec, dtype=np.float64)
                if arr.shape != (dim,):
                    raise ValueError(f"vector for {word!r} has shape {arr.shape}, expected ({dim},)")
                self.vectors[word] = arr
        self.fallback_seed = fallback_seed
        self._fallback_cache: dict[str, np.ndarray] = {}
        self.padding = np.zeros(dim, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.vectors)

    def __contains__(self, word: str) -> bool:
        return word in self.vectors

    def lookup(self, word: str) -> np.ndarray:
        vec = self.vectors.get(word)
        if vec is not None:
            return vec
        cached = self._fallback_cache.get(word)
        if cached is None:
            cached = oov_vector(word, self.dim, self.fallback_seed)
            self._fallback_cache[word] = cached
        return cached


@dataclass
class SentenceMatrix:
    """Fixed-size embedding matrix for one sentence.

    ``matrix`` is (max_len, dim); rows past the true token count ``n`` hold
    the padding vector. ``n`` never exceeds ``max_len`` (longer token lists
    are truncated).
    """

    matrix: np.ndarray
    n: int

    @property
    def max_len(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def embed_sentence(tokens: Sequence[str], table: EmbeddingTable,
                   max_len: int = DEFAULT_MAX_LEN) -> SentenceMatrix:
    """Stack per-token vectors in order, truncating and zero-padding to max_len."""
    n = min(len(tokens), max_len)
    matrix = np.zeros((max_len, table.dim), dtype=np.float64)
    for i in range(n):
        matrix[i] = table.lookup(tokens[i])
    return SentenceMatrix(matrix=matrix, n=n)


@dataclass(frozen=True)
class TextConfig:
    """Shape of the text branch: embedding size, truncation, filter bank."""

    dim: int = DEFAULT_DIM
    max_len: int = DEFAULT_MAX_LEN
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    filters_per_width: int = 100
    nonlinearity: str = "tanh"

    def __post_init__(self):
        if self.filters_per_width < 1:
            raise ValueError("filters_per_width must be positive")
        if any(h < 1 for h in self.widths):
            raise ValueError("filter widths must be positive")
        if tuple(sorted(self.widths)) != tuple(self.widths):
            raise ValueError("filter widths must be ascending")
        if self.nonlinearity not in ("tanh", "relu", "identity"):
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")

    @property
    def feature_size(self) -> int:
        # three pooled values per filter
        return 3 * self.filters_per_width * len(self.widths)


TEXT_PRESETS = {
    "full": TextConfig(filters_per_width=100),
    "tiny": TextConfig(filters_per_width=2),
}


def text_preset(name: str) -> TextConfig:
    try:
        return TEXT_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown text preset {name!r} (have {sorted(TEXT_PRESETS)})") from None


@dataclass
class TextBranchParams:
    """Learnable filter bank: per width a (h*dim, F) weight and an (F,) bias."""

    config: TextConfig
    weights: dict[int, Tensor] = field(default_factory=dict)
    biases: dict[int, Tensor] = field(default_factory=dict)

    def named_tensors(self, prefix: str = "text") -> dict[str, Tensor]:
        out = {}
        for h in self.config.widths:
            out[f"{prefix}.w{h}.weight"] = self.weights[h]
            out[f"{prefix}.w{h}.bias"] = self.biases[h]
        return out


def init_text_params(config: TextConfig, rng: np.random.Generator,
                     dtype=np.float32) -> TextBranchParams:
    """Symmetric uniform init for filters, zero biases."""
    params = TextBranchParams(config=config)
    f = config.filters_per_width
    for h in config.widths:
        fan_in = h * config.dim
        bound = np.sqrt(6.0 / (fan_in + f))
        w = rng.uniform(-bound, bound, size=(fan_in, f))
        params.weights[h] = Tensor(w.astype(dtype), requires_grad=True)
        params.biases[h] = Tensor(np.zeros(f, dtype=dtype), requires_grad=True)
    return params


def _nonlinearity(name: str):
    if name == "tanh":
        return tanh_op
    if name == "relu":
        return relu
    return lambda t: t


def _window_matrix(sm: SentenceMatrix, h: int) -> np.ndarray:
    """Rows are the h-word windows the filters slide over.

    Windows cover the true length only; a sentence shorter than h contributes
    a single window over the zero-padded matrix so no width ever goes empty.
    """
    if sm.n >= h:
        span = sm.matrix[:sm.n]
        win = sliding_window_view(span, (h, sm.dim))
        return win.reshape(sm.n - h + 1, h * sm.dim)
    return sm.matrix[:h].reshape(1, h * sm.dim)


def text_feature_maps(sm: SentenceMatrix, params: TextBranchParams) -> dict[int, Tensor]:
    """Per-width feature maps, one column per filter.

    For width h the result has shape (n - h + 1, F): row i holds
    f(w . window_i + b) for every filter. Differentiable with respect to the
    filter weights and biases; the sentence matrix itself stays frozen.
    """
    cfg = params.config
    act = _nonlinearity(cfg.nonlinearity)
    maps = {}
    for h in cfg.widths:
        windows = Tensor(_window_matrix(sm, h))
        pre = bias_add(matmul(windows, params.weights[h]), params.biases[h])
        maps[h] = act(pre)
    return maps


def encode_text(text: str | Sequence[str], table: EmbeddingTable,
                params: TextBranchParams) -> Tensor:
    """Full text branch: tokens -> pooled features of every filter.

    Output length is 3 * filters_per_width * len(widths), laid out
    width-ascending then filter-index-ascending, each filter contributing
    its [max, mean, min] block.
    """
    tokens = tokenize(text) if isinstance(text, str) else list(text)
    sm = embed_sentence(tokens, table, params.config.max_len)
    return encode_sentence_matrix(sm, params)


def encode_sentence_matrix(sm: SentenceMatrix, params: TextBranchParams) -> Tensor:
    if sm.dim != params.config.dim:
        raise ShapeError(
            f"sentence matrix dim {sm.dim} != text branch dim {params.config.dim}")
    maps = text_feature_maps(sm, params)
    blocks = []
    for h in params.config.widths:
        pooled = triple_pool_columns(maps[h])  # (F, 3)
        blocks.append(pooled.reshape(-1))
    return concat(blocks, axis=0) if len(blocks) > 1 else blocks[0]


def encoded_text_size(config: TextConfig) -> int:
    return config.feature_size
