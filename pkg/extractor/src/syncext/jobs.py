"""Extraction jobs: batch captions or images through encoders and emit
embedding files aligned to the caption corpus.

Output filenames follow the downstream bundle convention: text extraction
writes text_vlm.emb and text_sent.emb; image extraction writes
image_vlm.emb. Row order always equals corpus order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embwrite import l2_normalize, read_captions, write_embeddings
from .encoders import (
    DEFAULT_SENTENCE,
    DEFAULT_VLM,
    load_image_encoder,
    load_text_encoder,
)
from .errors import InputError, UsageError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


@dataclass(frozen=True)
class ExtractJob:
    """One extraction run: where to read, which encoders, where to write."""

    captions: Path
    out_dir: Path
    images: Path | None = None
    vlm_model: str = DEFAULT_VLM
    sentence_model: str = DEFAULT_SENTENCE
    batch: int = 32
    device: str = "cpu"
    skip_missing: bool = False

    def __post_init__(self) -> None:
        if self.batch < 1:
            raise UsageError(f"batch size must be >= 1, got {self.batch}")
        object.__setattr__(self, "captions", Path(self.captions))
        object.__setattr__(self, "out_dir", Path(self.out_dir))
        if self.images is not None:
            object.__setattr__(self, "images", Path(self.images))


@dataclass(frozen=True)
class ExtractResult:
    """Paths written by a job, plus any caption IDs skipped on the way."""

    paths: tuple[Path, ...]
    n_rows: int
    skipped_ids: tuple[str, ...] = field(default=())


def _encode_batched(encoder, items: list, batch: int) -> np.ndarray:
    chunks = [
        np.asarray(encoder.encode(items[lo : lo + batch]), dtype=np.float64)
        for lo in range(0, len(items), batch)
    ]
    return np.concatenate(chunks, axis=0)


def extract_text(job: ExtractJob) -> ExtractResult:
    """Encode every caption with the VLM text encoder and the sentence
    encoder; rows are normalized and aligned to corpus order."""
    records = read_captions(job.captions)
    ids = [rid for rid, _ in records]
    texts = [text for _, text in records]

    vlm = load_text_encoder(job.vlm_model, job.device)
    sent = load_text_encoder(job.sentence_model, job.device)

    vlm_rows = l2_normalize(_encode_batched(vlm, texts, job.batch), ids)
    sent_rows = l2_normalize(_encode_batched(sent, texts, job.batch), ids)

    vlm_path = job.out_dir / "text_vlm.emb"
    sent_path = job.out_dir / "text_sent.emb"
    write_embeddings(vlm_path, vlm_rows, ids)
    write_embeddings(sent_path, sent_rows, ids)
    return ExtractResult(paths=(vlm_path, sent_path), n_rows=len(ids))


def _image_path(images_dir: Path, caption_id: str) -> Path | None:
    for ext in IMAGE_EXTENSIONS:
        candidate = images_dir / (caption_id + ext)
        if candidate.is_file():
            return candidate
    return None


def _load_image(path: Path):
    from PIL import Image

    image = Image.open(path)
    image.load()
    return image


def extract_images(job: ExtractJob) -> ExtractResult:
    """Encode one image per caption ID with the VLM image encoder.

    Row i embeds the image whose filename stem equals caption ID i. A
    missing or undecodable image fails the job with every offender listed,
    unless skip_missing is set, in which case the offending rows are
    dropped and their IDs recorded next to the output matrix."""
    if job.images is None:
        raise InputError("image extraction needs an images directory")
    if not job.images.is_dir():
        raise InputError(f"images directory not found: {job.images}")
    records = read_captions(job.captions)

    kept_ids: list[str] = []
    kept_images: list = []
    problems: list[str] = []
    skipped: list[str] = []
    for rid, _ in records:
        path = _image_path(job.images, rid)
        if path is None:
            problems.append(f"{rid}: no image file in {job.images}")
            skipped.append(rid)
            continue
        try:
            image = _load_image(path)
        except OSError as exc:
            problems.append(f"{rid}: unreadable image {path}: {exc}")
            skipped.append(rid)
            continue
        kept_ids.append(rid)
        kept_images.append(image)

    if problems and not job.skip_missing:
        raise InputError(
            f"{len(problems)} of {len(records)} images unusable:\n  "
            + "\n  ".join(problems)
        )
    if not kept_ids:
        raise InputError("no usable images; nothing to encode")

    encoder = load_image_encoder(job.vlm_model, job.device)
    rows = l2_normalize(_encode_batched(encoder, kept_images, job.batch), kept_ids)
    for image in kept_images:
        image.close()

    out_path = job.out_dir / "image_vlm.emb"
    write_embeddings(out_path, rows, kept_ids)
    paths = [out_path]
    if skipped:
        skip_path = job.out_dir / "image_vlm.skipped.json"
        skip_path.write_text(json.dumps(skipped, indent=2) + "\n", encoding="utf-8")
        paths.append(skip_path)
    return ExtractResult(
        paths=tuple(paths), n_rows=len(kept_ids), skipped_ids=tuple(skipped)
    )
