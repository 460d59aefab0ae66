"""Text/image embedding backbones and surrogate feature extraction.

Three provider families:

* ``real``      — a pretrained joint text/image encoder loaded from a local
                  weights directory (no network download at runtime).
* ``mock``      — keyed-hash embeddings: deterministic, portable, no weights.
                  ``mock-linear`` is the differentiable variant (fixed random
                  projection of pixels, then L2 normalization) used wherever
                  gradients with respect to pixels are needed without weights.
* ``cache``     — precomputed embeddings loaded from a binary cache file.

All emitted embedding vectors are unit L2 norm. Encoders are read-only after
construction and safe for concurrent calls.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F


class BackboneError(Exception):
    """Provider unavailable or misconfigured."""


class MissingKeyError(KeyError):
    """Cache provider has no entry for the requested key."""


class CacheFormatError(Exception):
    """Embedding cache file is corrupt or has the wrong format."""


class InvalidInputError(ValueError):
    """Input pixels are not a valid image batch (e.g. NaN entries)."""


class ConfigurationError(Exception):
    """Model object does not expose what the operation needs."""


PROVIDERS = ("real", "mock", "mock-linear", "cache")


@dataclass(frozen=True)
class BackboneConfig:
    provider: str = "mock"
    model_id: str = "ViT-B-32"
    embed_dim: int = 512
    prompt_template: str = "a photo of a {label}"
    weights_path: str | None = None     # real provider: local weights dir
    input_hw: int = 32                  # mock-linear pixel-grid side length
    text_cache: str | None = None       # optional cache overriding text lookups
    image_cache: str | None = None      # cache provider: image embeddings by id

    def __post_init__(self):
        if self.provider not in PROVIDERS:
            raise BackboneError(f"unknown provider {self.provider!r}; expected one of {PROVIDERS}")
        if self.embed_dim <= 0:
            raise BackboneError("embed_dim must be positive")
        if self.prompt_template.count("{label}") != 1:
            raise BackboneError("prompt_template must contain exactly one {label} placeholder")


@dataclass(frozen=True)
class TextEmbedding:
    vector: torch.Tensor
    label: str
    prompt: str


@dataclass(frozen=True)
class ImageEmbedding:
    vector: torch.Tensor
    source_id: str


@dataclass(frozen=True)
class SurrogateFeatures:
    vector: torch.Tensor
    source_id: str


# ---------------------------------------------------------------------------
# hash-based mock embeddings (portable: depend only on key bytes + embed_dim)
# ---------------------------------------------------------------------------

def _hash_unit_vector(key: bytes, dim: int) -> torch.Tensor:
    words = []
    counter = 0
    while len(words) < dim:
        digest = hashlib.sha256(key + counter.to_bytes(4, "little")).digest()
        words.extend(struct.unpack("<8I", digest))
        counter += 1
    u = np.asarray(words[:dim], dtype=np.float64)
    v = (u / 2.0 ** 32) * 2.0 - 1.0
    v = v / np.linalg.norm(v)
    return torch.from_numpy(v.astype(np.float32))


def _projection_matrix(model_id: str, dim: int, n_pixels: int) -> torch.Tensor:
    seed_src = f"{model_id}:{dim}:{n_pixels}".encode()
    seed = int.from_bytes(hashlib.sha256(seed_src).digest()[:8], "little")
    g = torch.Generator().manual_seed(seed)
    return torch.randn(dim, n_pixels, generator=g) / n_pixels ** 0.5


# ---------------------------------------------------------------------------
# embedding cache file: magic SAEC, v1
# ---------------------------------------------------------------------------

CACHE_MAGIC = b"SAEC"
CACHE_VERSION = 1


def cache_store(path: str, entries) -> None:
    """Write (key, vector) pairs; bit-exact float32 round trip."""
    entries = [(k, np.asarray(v, dtype=np.float32).reshape(-1)) for k, v in entries]
    if not entries:
        raise CacheFormatError("refusing to store an empty cache")
    keys = [k for k, _ in entries]
    if len(set(keys)) != len(keys):
        raise CacheFormatError("duplicate keys in cache entries")
    dim = entries[0][1].shape[0]
    for k, v in entries:
        if v.shape[0] != dim:
            raise CacheFormatError(f"dimension mismatch for key {k!r}: {v.shape[0]} != {dim}")
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<HII", CACHE_VERSION, dim, len(entries)))
        for k, v in entries:
            kb = k.encode("utf-8")
            f.write(struct.pack("<H", len(kb)))
            f.write(kb)
            f.write(v.astype("<f4").tobytes())


def cache_load(path: str) -> dict[str, torch.Tensor]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CACHE_MAGIC:
        raise CacheFormatError(f"{path}: bad magic bytes {blob[:4]!r}")
    try:
        version, dim, count = struct.unpack_from("<HII", blob, 4)
    except struct.error as e:
        raise CacheFormatError(f"{path}: truncated header") from e
    if version != CACHE_VERSION:
        raise CacheFormatError(f"{path}: unsupported cache version {version}")
    out: dict[str, torch.Tensor] = {}
    off = 14
    for _ in range(count):
        try:
            (klen,) = struct.unpack_from("<H", blob, off)
            off += 2
            key = blob[off:off + klen].decode("utf-8")
            off += klen
            vec = np.frombuffer(blob, dtype="<f4", count=dim, offset=off).copy()
            if vec.shape[0] != dim:
                raise struct.error("short record")
            off += 4 * dim
        except (struct.error, ValueError) as e:
            raise CacheFormatError(f"{path}: truncated record") from e
        if key in out:
            raise CacheFormatError(f"{path}: duplicate key {key!r}")
        out[key] = torch.from_numpy(vec)
    return out


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------

class Backbone:
    """Config-driven pair of text and image encoders."""

    def __init__(self, cfg: BackboneConfig):
        self.cfg = cfg
        self._text_cache = cache_load(cfg.text_cache) if cfg.text_cache else None
        self._image_cache = cache_load(cfg.image_cache) if cfg.image_cache else None
        self._projection: torch.Tensor | None = None
        self._clip = None
        self._clip_processor = None
        if cfg.provider == "real":
            self._load_real()

    # -- provider setup ----------------------------------------------------

    def _load_real(self):
        if not self.cfg.weights_path:
            raise BackboneError("real provider requires weights_path (local directory)")
        try:
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as e:
            raise BackboneError("real provider requires the transformers package") from e
        try:
            self._clip = CLIPModel.from_pretrained(self.cfg.weights_path, local_files_only=True)
            self._clip_processor = CLIPProcessor.from_pretrained(
                self.cfg.weights_path, local_files_only=True)
        except Exception as e:
            raise BackboneError(f"could not load weights from {self.cfg.weights_path}: {e}") from e
        self._clip.eval()

    def _proj(self, n_pixels: int) -> torch.Tensor:
        if self._projection is None or self._projection.shape[1] != n_pixels:
            self._projection = _projection_matrix(self.cfg.model_id, self.cfg.embed_dim, n_pixels)
        return self._projection

    # -- text --------------------------------------------------------------

    def prompt(self, label: str) -> str:
        return self.cfg.prompt_template.format(label=label)

    def encode_text_batch(self, labels) -> torch.Tensor:
        """(L, d) unit-norm text embeddings, order preserving."""
        labels = list(labels)
        if not labels:
            raise ValueError("labels must be non-empty")
        if any(not lbl for lbl in labels):
            raise ValueError("labels must be non-empty strings")
        if self._text_cache is not None:
            return torch.stack([self._cache_lookup(self._text_cache, lbl) for lbl in labels])
        if self.cfg.provider == "cache":
            raise MissingKeyError("cache provider has no text cache configured")
        if self.cfg.provider == "real":
            return self._encode_text_real(labels)
        # hash mock (also the text side of mock-linear)
        vecs = [_hash_unit_vector(self.prompt(lbl).encode("utf-8"), self.cfg.embed_dim)
                for lbl in labels]
        return torch.stack(vecs)

    def _cache_lookup(self, cache, key):
        if key not in cache:
            raise MissingKeyError(f"no cached embedding for key {key!r}")
        v = cache[key]
        return v / v.norm()

    def _encode_text_real(self, labels) -> torch.Tensor:
        prompts = [self.prompt(lbl) for lbl in labels]
        inputs = self._clip_processor(text=prompts, return_tensors="pt", padding=True)
        with torch.no_grad():
            feats = self._clip.get_text_features(**inputs)
        return F.normalize(feats, dim=-1)

    # -- image -------------------------------------------------------------

    def encode_image_batch(self, images: torch.Tensor,
                           source_ids=None) -> torch.Tensor:
        """(N, d) unit-norm image embeddings; differentiable for real/mock-linear."""
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if torch.isnan(images).any():
            raise InvalidInputError("image batch contains NaN pixels")
        provider = self.cfg.provider
        if provider == "mock-linear":
            hw = self.cfg.input_hw
            x = F.adaptive_avg_pool2d(images, (hw, hw)).flatten(1)
            feats = x @ self._proj(x.shape[1]).T
            return F.normalize(feats, dim=-1)
        if provider == "mock":
            vecs = [_hash_unit_vector(img.detach().numpy().astype(np.float32).tobytes(),
                                      self.cfg.embed_dim)
                    for img in images]
            return torch.stack(vecs)
        if provider == "real":
            return self._encode_image_real(images)
        # cache provider: lookups by source id
        if self._image_cache is None:
            raise BackboneError("cache provider requires image_cache for image encoding")
        if source_ids is None:
            raise BackboneError("cache provider needs source_ids to encode images")
        return torch.stack([self._cache_lookup(self._image_cache, sid) for sid in source_ids])

    def _encode_image_real(self, images: torch.Tensor) -> torch.Tensor:
        mean = torch.tensor([0.48145466, 0.4578275, 0.40821073]).view(1, 3, 1, 1)
        std = torch.tensor([0.26862954, 0.26130258, 0.27577711]).view(1, 3, 1, 1)
        size = self._clip.config.vision_config.image_size
        x = F.interpolate(images, size=(size, size), mode="bilinear", align_corners=False)
        x = (x - mean) / std
        feats = self._clip.get_image_features(pixel_values=x)
        return F.normalize(feats, dim=-1)


# ---------------------------------------------------------------------------
# spec-level operations
# ---------------------------------------------------------------------------

def encode_text(labels, cfg: BackboneConfig) -> list[TextEmbedding]:
    bb = cfg if isinstance(cfg, Backbone) else Backbone(cfg)
    vecs = bb.encode_text_batch(labels)
    return [TextEmbedding(vecs[i], labels[i], bb.prompt(labels[i]))
            for i in range(len(labels))]


def encode_image(batch: torch.Tensor, cfg: BackboneConfig,
                 source_ids=None) -> list[ImageEmbedding]:
    bb = cfg if isinstance(cfg, Backbone) else Backbone(cfg)
    vecs = bb.encode_image_batch(batch, source_ids=source_ids)
    n = vecs.shape[0]
    ids = source_ids if source_ids is not None else [str(i) for i in range(n)]
    return [ImageEmbedding(vecs[i], ids[i]) for i in range(n)]


def surrogate_features(model, batch: torch.Tensor,
                       source_ids=None) -> list[SurrogateFeatures]:
    feats = surrogate_feature_batch(model, batch)
    n = feats.shape[0]
    ids = source_ids if source_ids is not None else [str(i) for i in range(n)]
    return [SurrogateFeatures(feats[i], ids[i]) for i in range(n)]


def surrogate_feature_batch(model, batch: torch.Tensor) -> torch.Tensor:
    """Penultimate-layer activations (no normalization)."""
    if not hasattr(model, "features") or not callable(model.features):
        raise ConfigurationError(
            "model does not expose a named penultimate activation (.features)")
    if batch.dim() == 3:
        batch = batch.unsqueeze(0)
    return model.features(batch)
