"""Alignment scorers for caption-image pairs.

Two scorers, both returning similarities in [-1, 1] at unit scale:

    cos   cosine between the caption's VLM text embedding and the image's
          VLM embedding
    ret   cycle-consistency: retrieve the top-K_r captions for the image
          (image-to-text over the VLM space), then take the best sentence
          similarity between those captions and the query caption

For "ret", a retrieved caption equal to the query caption scores exactly
1.0: its sentence similarity to itself is 1 by definition, so the value is
pinned rather than recomputed through rounding.

The image-to-text retrieval always runs as one text-against-images pass
(columns of the same similarity sweep the pipeline uses for selection), so
batch scoring, scalar scoring, and the fused pipeline agree bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embstore import DatasetBundle
from .errors import ConfigError, ValidationError
from .simkernel import TopKTable, accum_dtype, blocked_topk, score_pairs

SCORER_KINDS = ("cos", "ret")

# Pair chunk for gathered sentence similarities; bounds peak gather memory.
_PAIR_CHUNK = 1 << 14


@dataclass(frozen=True)
class ScorerConfig:
    """Which scorer to run; the scale factor is fixed at 1.0.

    ``k_r`` is the image-to-text retrieval depth, used only by "ret".
    """

    kind: str
    weight: float = 1.0
    k_r: int = 2

    def __post_init__(self) -> None:
        if self.kind not in SCORER_KINDS:
            raise ConfigError(
                f"unknown scorer {self.kind!r} (choose from {', '.join(SCORER_KINDS)})"
            )
        if self.weight != 1.0:
            raise ConfigError(f"scorer scale factor is fixed at 1.0, got {self.weight}")
        if self.k_r < 1:
            raise ConfigError(f"K_r must be >= 1, got {self.k_r}")


def check_scorer(bundle: DatasetBundle, scorer: ScorerConfig) -> None:
    if scorer.kind == "ret" and scorer.k_r > bundle.n:
        raise ValidationError(
            f"K_r={scorer.k_r} exceeds the caption pool of {bundle.n}"
        )


def _check_pair(bundle: DatasetBundle, image_index: int, caption_index: int) -> None:
    if not 0 <= caption_index < bundle.n:
        raise ValidationError(
            f"caption index {caption_index} out of range for N={bundle.n}"
        )
    if not 0 <= image_index < bundle.m:
        raise ValidationError(
            f"image index {image_index} out of range for M={bundle.m}"
        )


def cycle_retrieval(
    bundle: DatasetBundle,
    k_r: int,
    *,
    row_k: int | None = None,
    accum: str = "float32",
    workers: int = 1,
) -> tuple[TopKTable | None, TopKTable]:
    """One text-against-images sweep: per-image top-k_r captions (columns),
    optionally harvesting per-caption top-row_k images (rows) for free."""
    rows, cols = blocked_topk(
        bundle.text_vlm.data,
        bundle.image_vlm.data,
        row_k=row_k,
        col_k=k_r,
        accum=accum,
        workers=workers,
    )
    assert cols is not None
    return rows, cols


def ret_scores(
    bundle: DatasetBundle,
    caption_rows: np.ndarray,
    image_rows: np.ndarray,
    retrieved_captions: np.ndarray,
    *,
    accum: str = "float32",
) -> np.ndarray:
    """Cycle-consistency scores for aligned (caption, image) index vectors.

    ``retrieved_captions`` is the (M, k_r) per-image caption table from
    cycle_retrieval. Returns float64 scores in [-1, 1].
    """
    dtype = accum_dtype(accum)
    sent = bundle.text_sent.data
    caption_rows = np.asarray(caption_rows, dtype=np.int64)
    image_rows = np.asarray(image_rows, dtype=np.int64)
    out = np.empty(caption_rows.size, dtype=np.float64)
    for lo in range(0, caption_rows.size, _PAIR_CHUNK):
        hi = min(lo + _PAIR_CHUNK, caption_rows.size)
        cap = caption_rows[lo:hi]
        r_idx = retrieved_captions[image_rows[lo:hi]]  # (c, k_r)
        q = sent[cap].astype(dtype, copy=False)
        rmat = sent[r_idx].astype(dtype, copy=False)
        dots = np.einsum("cd,ckd->ck", q, rmat).astype(np.float64)
        dots = np.where(r_idx == cap[:, None], 1.0, dots)
        out[lo:hi] = dots.max(axis=1)
    return np.clip(out, -1.0, 1.0)


def score_cos(bundle: DatasetBundle, image_index: int, caption_index: int) -> float:
    """Cosine alignment of one pair, reference precision (float64)."""
    bundle = bundle.unit_normalized()
    _check_pair(bundle, image_index, caption_index)
    return float(
        score_pairs(
            [caption_index],
            bundle.text_vlm,
            [image_index],
            bundle.image_vlm,
            accum="float64",
        )[0]
    )


def score_ret(
    bundle: DatasetBundle,
    image_index: int,
    caption_index: int,
    k_r: int,
    *,
    accum: str = "float32",
) -> float:
    """Cycle-consistency alignment of one pair."""
    bundle = bundle.unit_normalized()
    _check_pair(bundle, image_index, caption_index)
    if k_r < 1:
        raise ConfigError(f"K_r must be >= 1, got {k_r}")
    if k_r > bundle.n:
        raise ValidationError(f"K_r={k_r} exceeds the caption pool of {bundle.n}")
    _, cols = blocked_topk(
        bundle.text_vlm.data,
        bundle.image_vlm.data[image_index : image_index + 1],
        col_k=k_r,
        accum=accum,
    )
    retrieved = cols.indices[0]
    score = ret_scores(
        bundle,
        np.full(1, caption_index, dtype=np.int64),
        np.zeros(1, dtype=np.int64),
        retrieved[None, :],
        accum=accum,
    )
    return float(score[0])


def score_candidates(
    bundle: DatasetBundle,
    cand,
    scorer: ScorerConfig,
    *,
    accum: str = "float32",
) -> tuple[int, float]:
    """Best candidate for one caption: (image index, score).

    Ties break by earliest retrieval rank (candidate order), which also
    settles equal-scoring distinct images deterministically. Uses the same
    batch numerics as the pipeline; for "ret" this recomputes the full
    retrieval sweep, so prefer the pipeline for more than a few captions.
    """
    bundle = bundle.unit_normalized()
    check_scorer(bundle, scorer)
    images = np.asarray(cand.image_indices, dtype=np.int64)
    captions = np.full(images.size, cand.caption_index, dtype=np.int64)
    if scorer.kind == "cos":
        scores = score_pairs(
            captions, bundle.text_vlm, images, bundle.image_vlm, accum=accum
        )
    else:
        _, cols = cycle_retrieval(bundle, scorer.k_r, accum=accum)
        scores = ret_scores(bundle, captions, images, cols.indices, accum=accum)
    pos = int(np.argmax(scores))
    return int(images[pos]), float(scores[pos])
