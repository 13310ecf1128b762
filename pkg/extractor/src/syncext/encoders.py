"""Encoder registry: deterministic offline encoders plus lazily loaded
pretrained models.

Offline encoder names carry their width, e.g. "hash-bow/64" (text) and
"pixel-stats/64" (images). Any other name is treated as a pretrained model
identifier and resolved through sentence-transformers (text) or
transformers (images); both load lazily so the offline path has no heavy
imports.
"""

from __future__ import annotations

import hashlib
import re

import numpy as np

from .errors import ModelError

DEFAULT_VLM = "google/siglip2-base-patch16-256"
DEFAULT_SENTENCE = "sentence-transformers/all-MiniLM-L6-v2"

_TOKEN = re.compile(r"[a-z0-9]+")
_PIXEL_SIDE = 16
_PROJECTION_SEED = 0x5E_ED


def _offline_width(name: str, family: str) -> int | None:
    prefix = family + "/"
    if not name.startswith(prefix):
        return None
    try:
        width = int(name[len(prefix):])
    except ValueError:
        raise ModelError(f"bad width in encoder name {name!r}") from None
    if width < 1:
        raise ModelError(f"bad width in encoder name {name!r}")
    return width


def _token_vector(token: str, width: int) -> np.ndarray:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    key = np.frombuffer(digest, dtype="<u8")[0]
    rng = np.random.Generator(np.random.Philox(key=key))
    return rng.standard_normal(width)


class HashBowEncoder:
    """Deterministic text encoder: sum of seeded per-token vectors."""

    def __init__(self, width: int) -> None:
        self.width = width
        self._cache: dict[str, np.ndarray] = {}

    def encode(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.width), dtype=np.float64)
        for row, text in enumerate(texts):
            for token in _TOKEN.findall(text.lower()):
                vec = self._cache.get(token)
                if vec is None:
                    vec = _token_vector(token, self.width)
                    self._cache[token] = vec
                out[row] += vec
        return out


class PixelStatsEncoder:
    """Deterministic image encoder: downsampled pixels through a fixed
    seeded projection, with a bias feature so no image embeds to zero."""

    def __init__(self, width: int) -> None:
        self.width = width
        side = _PIXEL_SIDE
        rng = np.random.Generator(np.random.Philox(key=_PROJECTION_SEED))
        features = side * side * 3 + 1
        self._projection = rng.standard_normal((features, width)) / np.sqrt(features)

    def encode(self, images: list) -> np.ndarray:
        from PIL import Image

        rows = np.empty((len(images), self._projection.shape[0]), dtype=np.float64)
        for row, image in enumerate(images):
            small = image.convert("RGB").resize(
                (_PIXEL_SIDE, _PIXEL_SIDE), Image.Resampling.BILINEAR
            )
            pixels = np.asarray(small, dtype=np.float64).reshape(-1) / 255.0
            rows[row, :-1] = pixels
            rows[row, -1] = 1.0
        return rows @ self._projection


def _pretrained_text(name: str, device: str):
    try:
        from sentence_transformers import SentenceTransformer
    except ImportError:
        raise ModelError(
            f"text encoder {name!r} needs the sentence-transformers package"
        ) from None
    try:
        model = SentenceTransformer(name, device=device)
    except Exception as exc:
        raise ModelError(f"failed to load text encoder {name!r}: {exc}") from None

    class _Wrapper:
        width = model.get_sentence_embedding_dimension()

        @staticmethod
        def encode(texts: list[str]) -> np.ndarray:
            return np.asarray(
                model.encode(list(texts), normalize_embeddings=False),
                dtype=np.float64,
            )

    return _Wrapper()


def _pretrained_image(name: str, device: str):
    try:
        import torch
        from transformers import AutoModel, AutoProcessor
    except ImportError:
        raise ModelError(
            f"image encoder {name!r} needs the transformers package"
        ) from None
    try:
        processor = AutoProcessor.from_pretrained(name)
        model = AutoModel.from_pretrained(name).to(device).eval()
    except Exception as exc:
        raise ModelError(f"failed to load image encoder {name!r}: {exc}") from None

    class _Wrapper:
        width = getattr(model.config, "projection_dim", None)

        @staticmethod
        def encode(images: list) -> np.ndarray:
            batch = processor(images=images, return_tensors="pt").to(device)
            with torch.no_grad():
                features = model.get_image_features(**batch)
            return features.cpu().numpy().astype(np.float64)

    return _Wrapper()


def load_text_encoder(name: str, device: str = "cpu"):
    """Resolve a text encoder by name; offline names never import torch."""
    width = _offline_width(name, "hash-bow")
    if width is not None:
        return HashBowEncoder(width)
    return _pretrained_text(name, device)


def load_image_encoder(name: str, device: str = "cpu"):
    """Resolve an image encoder by name; offline names never import torch."""
    width = _offline_width(name, "pixel-stats")
    if width is not None:
        return PixelStatsEncoder(width)
    return _pretrained_image(name, device)
