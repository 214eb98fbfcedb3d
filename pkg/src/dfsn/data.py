"""Datasets and file formats: manifests, word vectors, PPM images,
checkpoints, and the synthetic cross-modal data generator.

Formats are deliberately minimal and self-describing: JSONL manifests,
the textual word-vector format ("count dim" header, one word per line),
binary PPM (P6) images, and a little-endian binary checkpoint with a CRC.
"""

from __future__ import annotations

import json
import math
import os
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .model import (FusionConfig, FusionModelParams, ModelSample, config_from_dict,
                    config_to_dict, empty_model)
from .image import preprocess_image
from .text import EmbeddingTable, tokenize


class ManifestError(ValueError):
    """Malformed manifest file."""


class EmbeddingFormatError(ValueError):
    """Malformed word-vector file."""


class PpmFormatError(ValueError):
    """Malformed or unsupported PPM image."""


class CheckpointFormatError(ValueError):
    """Corrupt, mismatched, or unsupported checkpoint file."""


# -- manifests ----------------------------------------------------------------


@dataclass
class Sample:
    """One (image, text, binary label) record."""

    id: str
    image_path: str
    text: str
    label: int


@dataclass
class Manifest:
    samples: list[Sample] = field(default_factory=list)
    note: str = ""
    split: str = "unsplit"

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


def _check_unique_ids(samples: Sequence[Sample], context: str) -> None:
    seen = set()
    for s in samples:
        if s.id in seen:
            raise ManifestError(f"{context}: duplicate sample id {s.id!r}")
        seen.add(s.id)


def load_manifest(path) -> Manifest:
    """Read a JSONL manifest: one {id, image, text, label} object per line."""
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from None
            for key in ("id", "image", "text", "label"):
                if key not in rec:
                    raise ManifestError(f"{path}: line {lineno}: missing key {key!r}")
            label = rec["label"]
            if label not in (0, 1):
                raise ManifestError(f"{path}: line {lineno}: label must be 0 or 1, got {label!r}")
            samples.append(Sample(id=str(rec["id"]), image_path=str(rec["image"]),
                                  text=str(rec["text"]), label=int(label)))
    _check_unique_ids(samples, str(path))
    return Manifest(samples=samples, note=str(path))


def save_manifest(manifest: Manifest, path) -> None:
    _check_unique_ids(manifest.samples, str(path))
    with open(path, "w", encoding="utf-8") as fh:
        for s in manifest.samples:
            rec = {"id": s.id, "image": s.image_path, "text": s.text, "label": s.label}
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def filter_by_length(manifest: Manifest) -> Manifest:
    """Keep samples whose token count t satisfies 5 < t < 150, order preserved."""
    kept = [s for s in manifest.samples if 5 < len(tokenize(s.text)) < 150]
    return replace(manifest, samples=kept)


def split_train_test(manifest: Manifest, seed: int,
                     train_frac: float = 0.8) -> tuple[Manifest, Manifest]:
    """Seeded shuffle, floor(train_frac * n) samples to train, rest to test."""
    if len(manifest) == 0:
        raise ValueError("cannot split an empty manifest")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(manifest.samples))
    n_train = int(math.floor(train_frac * len(manifest.samples)))
    train = [manifest.samples[i] for i in perm[:n_train]]
    test = [manifest.samples[i] for i in perm[n_train:]]
    return (replace(manifest, samples=train, split="train"),
            replace(manifest, samples=test, split="test"))


# -- word vectors --------------------------------------------------------------


def load_embeddings(path, fallback_seed: int = 0) -> EmbeddingTable:
    """Parse the textual vector format: header "count dim", then
    "word v1 ... v_dim" per line."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        parts = header.split()
        if len(parts) != 2:
            raise EmbeddingFormatError(f"{path}: line 1: header must be 'count dim'")
        try:
            count, dim = int(parts[0]), int(parts[1])
        except ValueError:
            raise EmbeddingFormatError(f"{path}: line 1: header must be two integers") from None
        if count < 0 or dim < 1:
            raise EmbeddingFormatError(f"{path}: line 1: bad header values {count} {dim}")
        vectors: dict[str, np.ndarray] = {}
        rows = 0
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != dim + 1:
                raise EmbeddingFormatError(
                    f"{path}: line {lineno}: expected 1 word + {dim} values, got {len(fields)} fields")
            word = fields[0]
            try:
                vec = np.array([float(x) for x in fields[1:]], dtype=np.float64)
            except ValueError:
                raise EmbeddingFormatError(f"{path}: line {lineno}: non-numeric value") from None
            if not np.isfinite(vec).all():
                raise EmbeddingFormatError(f"{path}: line {lineno}: non-finite value")
            vectors[word] = vec
            rows += 1
        if rows != count:
            raise EmbeddingFormatError(f"{path}: header promises {count} rows, found {rows}")
    return EmbeddingTable(dim=dim, vectors=vectors, fallback_seed=fallback_seed)


# -- PPM images ----------------------------------------------------------------


def _read_ppm_token(data: bytes, pos: int, path) -> tuple[bytes, int]:
    # skip whitespace and '#' comments between header fields
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            while pos < n and data[pos:pos + 1] != b"\n":
                pos += 1
        else:
            break
    if pos >= n:
        raise PpmFormatError(f"{path}: truncated header")
    start = pos
    while pos < n and not data[pos:pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def load_ppm(path) -> np.ndarray:
    """Decode a binary PPM (P6, maxval 255) into (H, W, 3) uint8 pixels."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic, pos = _read_ppm_token(data, 0, path)
    if magic != b"P6":
        raise PpmFormatError(f"{path}: unsupported format {magic!r}, only binary P6 is handled")
    fields = []
    for name in ("width", "height", "maxval"):
        tok, pos = _read_ppm_token(data, pos, path)
        try:
            fields.append(int(tok))
        except ValueError:
            raise PpmFormatError(f"{path}: non-numeric {name} {tok!r}") from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PpmFormatError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise PpmFormatError(f"{path}: unsupported maxval {maxval}, expected 255")
    pos += 1  # single whitespace byte separates header from payload
    need = 3 * width * height
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise PpmFormatError(f"{path}: truncated payload, expected {need} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def save_ppm(path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ValueError(f"save_ppm needs (H, W, 3) uint8 pixels, got {arr.shape} {arr.dtype}")
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


# -- checkpoints ----------------------------------------------------------------

CHECKPOINT_MAGIC = b"DFSN1"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: FusionModelParams, path) -> None:
    """Write a versioned binary checkpoint (f32 payloads, CRC32 at the end).

    The write goes through a temporary file and an atomic rename. Round
    trips are bit-exact for float32 parameter tensors; float64 tensors are
    stored at float32 precision.
    """
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<H", CHECKPOINT_VERSION)
    config_json = json.dumps(config_to_dict(params.config),
                             sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob += struct.pack("<I", len(config_json))
    blob += config_json
    tensors = params.named_tensors()
    blob += struct.pack("<I", len(tensors))
    for name, tensor in tensors.items():
        name_bytes = name.encode("utf-8")
        blob += struct.pack("<H", len(name_bytes))
        blob += name_bytes
        blob += struct.pack("<B", tensor.ndim)
        for extent in tensor.shape:
            blob += struct.pack("<I", extent)
        blob += tensor.values.astype("<f4", copy=False).tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
    os.replace(tmp, path)


def load_checkpoint(path) -> FusionModelParams:
    """Read a checkpoint, validating magic, version, CRC, and tensor shapes
    against the parameter structure the echoed config implies."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(CHECKPOINT_MAGIC) + 2 + 4 + 4:
        raise CheckpointFormatError(f"{path}: file too short to be a checkpoint")
    if data[:5] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {data[:5]!r}")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) != stored_crc:
        raise CheckpointFormatError(f"{path}: checksum mismatch, file is corrupt")
    pos = 5
    version = struct.unpack_from("<H", data, pos)[0]
    pos += 2
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"{path}: version {version} unsupported (expected {CHECKPOINT_VERSION})")
    (config_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    try:
        config = config_from_dict(json.loads(data[pos:pos + config_len].decode("utf-8")))
    except (ValueError, KeyError) as exc:
        raise CheckpointFormatError(f"{path}: bad config block ({exc})") from None
    pos += config_len
    (tensor_count,) = struct.unpack_from("<I", data, pos)
    pos += 4

    params = empty_model(config)
    expected = params.named_tensors()
    seen = set()
    end = len(data) - 4
    for _ in range(tensor_count):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        ndim = data[pos]
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos) if ndim else ()
        pos += 4 * ndim
        numel = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = data[pos:pos + 4 * numel]
        pos += 4 * numel
        if pos > end:
            raise CheckpointFormatError(f"{path}: tensor table overruns the file")
        if name not in expected:
            raise CheckpointFormatError(f"{path}: unexpected tensor {name!r} for this config")
        target = expected[name]
        if tuple(shape) != target.shape:
            raise CheckpointFormatError(
                f"{path}: tensor {name!r} has shape {tuple(shape)}, config implies {target.shape}")
        values = np.frombuffer(payload, dtype="<f4").reshape(shape)
        target.values[...] = values.astype(target.values.dtype)
        seen.add(name)
    if pos != end:
        raise CheckpointFormatError(f"{path}: {end - pos} unexpected trailing bytes")
    missing = sorted(set(expected) - seen)
    if missing:
        raise CheckpointFormatError(f"{path}: missing tensors {missing}")
    return params


# -- synthetic cross-modal dataset ---------------------------------------------

POSITIVE_WORDS = ("wonderful", "amazing", "beautiful", "happy", "lovely",
                  "delightful", "joyful", "bright")
NEGATIVE_WORDS = ("terrible", "awful", "sad", "gloomy", "horrible",
                  "miserable", "dreadful", "bleak")
NEUTRAL_WORDS = ("the", "a", "photo", "picture", "street", "city", "day",
                 "view", "near", "along", "morning", "shows", "with", "and",
                 "some", "frame", "taken", "building")

REGIMES = ("a", "b", "c", "d")
SYNTH_IMAGE_SIDE = 32
MIN_TOKENS = 6
MAX_TOKENS = 149


def _warm_image(rng: np.random.Generator) -> np.ndarray:
    base = np.array([rng.uniform(170, 240), rng.uniform(120, 190), rng.uniform(40, 110)])
    return _textured(base, rng)


def _cold_image(rng: np.random.Generator) -> np.ndarray:
    base = np.array([rng.uniform(10, 80), rng.uniform(25, 100), rng.uniform(90, 170)])
    return _textured(base, rng)


def _textured(base: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    s = SYNTH_IMAGE_SIDE
    img = np.broadcast_to(base, (s, s, 3)).copy()
    img += rng.normal(0.0, 18.0, size=(s, s, 3))
    # one soft disk of shifted shade for some spatial structure
    cy, cx = rng.uniform(4, s - 4, size=2)
    radius = rng.uniform(3, 8)
    yy, xx = np.mgrid[0:s, 0:s]
    disk = ((yy - cy) ** 2 + (xx - cx) ** 2) < radius ** 2
    img[disk] += rng.uniform(-30, 30, size=3)
    return np.clip(img, 0, 255).astype(np.uint8)


def _gray_image(rng: np.random.Generator) -> np.ndarray:
    s = SYNTH_IMAGE_SIDE
    v = np.clip(rng.normal(128.0, 20.0, size=(s, s)), 0, 255)
    return np.repeat(v[:, :, None], 3, axis=2).astype(np.uint8)


def _neutral_text(rng: np.random.Generator) -> list[str]:
    length = int(rng.integers(MIN_TOKENS, MAX_TOKENS + 1))
    idx = rng.integers(0, len(NEUTRAL_WORDS), size=length)
    return [NEUTRAL_WORDS[i] for i in idx]


def _polar_text(rng: np.random.Generator, positive: bool) -> list[str]:
    tokens = _neutral_text(rng)
    lexicon = POSITIVE_WORDS if positive else NEGATIVE_WORDS
    n_marks = max(2, len(tokens) // 10)
    positions = rng.choice(len(tokens), size=min(n_marks, len(tokens)), replace=False)
    for p in positions:
        tokens[p] = lexicon[int(rng.integers(0, len(lexicon)))]
    return tokens


def _regime_counts(n: int, mix: Sequence[float]) -> list[int]:
    if len(mix) != 4:
        raise ValueError(f"regime mix needs 4 proportions, got {len(mix)}")
    if any(p < 0 for p in mix):
        raise ValueError("regime proportions must be nonnegative")
    if abs(sum(mix) - 1.0) > 1e-9:
        raise ValueError(f"regime proportions must sum to 1, got {sum(mix)}")
    base = [int(math.floor(p * n)) for p in mix]
    remainders = [(p * n - b, -i) for i, (p, b) in enumerate(zip(mix, base))]
    for _, neg_i in sorted(remainders, reverse=True)[: n - sum(base)]:
        base[-neg_i] += 1
    return base


def gen_synthetic(n: int, regime_mix: Sequence[float] = (0.25, 0.25, 0.25, 0.25),
                  seed: int = 0, out_dir=".") -> Manifest:
    """Emit n samples across the four cross-modal regimes and write their images.

    Regimes (encoded as the first character of each sample id):
      a: image and text both informative, positive label;
      b: image and text both informative, negative label;
      c: image informative, text neutral (labels balanced by alternation);
      d: text informative, image neutral (labels balanced by alternation).
    Positive images are bright and warm-dominant, negative ones dark and
    cold-dominant, neutral ones gray noise. Image files land under
    ``out_dir/images/``; manifest paths are relative to ``out_dir``.
    """
    counts = _regime_counts(n, regime_mix)
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    samples = []
    serial = 0
    for regime, count in zip(REGIMES, counts):
        for j in range(count):
            if regime == "a":
                label = 1
            elif regime == "b":
                label = 0
            else:
                label = 1 if j % 2 == 0 else 0
            if regime == "d":
                img = _gray_image(rng)
            elif label == 1:
                img = _warm_image(rng)
            else:
                img = _cold_image(rng)
            if regime == "c":
                tokens = _neutral_text(rng)
            else:
                tokens = _polar_text(rng, positive=(label == 1))
            sample_id = f"{regime}{serial:05d}"
            rel_path = f"images/{sample_id}.ppm"
            save_ppm(out_dir / rel_path, img)
            samples.append(Sample(id=sample_id, image_path=rel_path,
                                  text=" ".join(tokens), label=label))
            serial += 1
    return Manifest(samples=samples, note=f"synthetic n={n} seed={seed}")


# -- materialization -----------------------------------------------------------


def materialize(manifest: Manifest, base_dir, config: FusionConfig,
                table: Optional[EmbeddingTable]) -> list[ModelSample]:
    """Decode and preprocess every sample once, for training or evaluation.

    Image paths resolve relative to ``base_dir`` (usually the manifest's
    directory) unless absolute.
    """
    base = Path(base_dir)
    out = []
    needs_image = config.modality in ("fused", "image")
    needs_text = config.modality in ("fused", "text")
    for s in manifest.samples:
        image = None
        if needs_image:
            path = Path(s.image_path)
            if not path.is_absolute():
                path = base / path
            pixels = load_ppm(path)
            image = preprocess_image(pixels, config.image.input_side, dtype=config.np_dtype)
        tokens = tokenize(s.text) if needs_text else None
        out.append(ModelSample(image=image, tokens=tokens, label=s.label, id=s.id))
    return out
