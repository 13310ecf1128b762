"""Candidate-image selection.

Five strategies decide which images a caption may be paired with:

    one   the caption's own generated image, nothing else
    t2i   top-K images retrieved by the caption's VLM text embedding
    t2t   top-K captions retrieved by the caption, mapped to their paired
          images
    i2t   top-K captions retrieved by the caption's paired image, mapped to
          their paired images
    i2i   top-K images retrieved by the caption's paired image

Every strategy except t2i needs the paired layout (M == N, image row j
generated from caption j). Retrieval is exact with ties broken by
ascending index, so selection is fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embstore import DatasetBundle
from .errors import ConfigError, ValidationError
from .simkernel import blocked_topk

KINDS = ("one", "t2i", "t2t", "i2t", "i2i")
PAIRED_KINDS = frozenset({"one", "t2t", "i2t", "i2i"})


@dataclass(frozen=True)
class SelectionStrategy:
    """Which candidate images each caption considers.

    ``k`` is the retrieval depth; it is ignored for kind "one".
    """

    kind: str
    k: int = 15

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(
                f"unknown selection strategy {self.kind!r} (choose from {', '.join(KINDS)})"
            )
        if self.k < 1:
            raise ConfigError(f"K must be >= 1, got {self.k}")


@dataclass(frozen=True, eq=False)
class CandidateSet:
    """One caption's candidate images, best retrieval rank first."""

    caption_index: int
    image_indices: np.ndarray

    def __post_init__(self) -> None:
        idx = np.asarray(self.image_indices, dtype=np.int64)
        if idx.ndim != 1 or idx.size == 0:
            raise ValidationError(
                f"candidate set for caption {self.caption_index} must be a non-empty vector"
            )
        if np.unique(idx).size != idx.size:
            raise ValidationError(
                f"candidate set for caption {self.caption_index} has duplicate images"
            )
        object.__setattr__(self, "image_indices", idx)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CandidateSet):
            return NotImplemented
        return self.caption_index == other.caption_index and np.array_equal(
            self.image_indices, other.image_indices
        )


def check_compatible(bundle: DatasetBundle, strategy: SelectionStrategy) -> None:
    """Reject strategy/bundle combinations that cannot be evaluated."""
    if strategy.kind in PAIRED_KINDS and not bundle.paired:
        raise ValidationError(
            f"strategy {strategy.kind!r} needs paired images (M == N); "
            f"bundle has N={bundle.n} captions and M={bundle.m} images"
        )
    if strategy.kind != "one":
        pool = bundle.m if strategy.kind in ("t2i", "i2i") else bundle.n
        if strategy.k > pool:
            raise ValidationError(
                f"K={strategy.k} exceeds the {strategy.kind} retrieval pool of {pool}"
            )


def _dedup_keep_rank(idx: np.ndarray) -> np.ndarray:
    """Drop repeated indices, keeping each one's best (earliest) rank."""
    _, first = np.unique(idx, return_index=True)
    if first.size == idx.size:
        return idx
    return idx[np.sort(first)]


def candidate_table(
    bundle: DatasetBundle,
    strategy: SelectionStrategy,
    *,
    accum: str = "float32",
    workers: int = 1,
) -> np.ndarray:
    """All captions' candidates as one (N, k_eff) index array, rank-ordered.

    The rectangular form feeds the batch scorer; ``select_all`` wraps it in
    CandidateSet objects. Retrieved indices are distinct per row already,
    so no row needs deduplication here.
    """
    check_compatible(bundle, strategy)
    if strategy.kind == "one":
        return np.arange(bundle.n, dtype=np.int64)[:, None]
    query = bundle.text_vlm if strategy.kind in ("t2i", "t2t") else bundle.image_vlm
    pool = bundle.image_vlm if strategy.kind in ("t2i", "i2i") else bundle.text_vlm
    rows, _ = blocked_topk(
        query.data, pool.data, row_k=strategy.k, accum=accum, workers=workers
    )
    # For t2t/i2t the retrieved caption j maps to its paired image j, so the
    # caption indices are already image indices.
    return rows.indices


def select_all(
    bundle: DatasetBundle,
    strategy: SelectionStrategy,
    *,
    accum: str = "float32",
    workers: int = 1,
) -> list[CandidateSet]:
    """Candidate sets for every caption, one blocked retrieval pass."""
    table = candidate_table(bundle, strategy, accum=accum, workers=workers)
    return [
        CandidateSet(caption_index=i, image_indices=_dedup_keep_rank(table[i]))
        for i in range(bundle.n)
    ]


def select(
    bundle: DatasetBundle,
    strategy: SelectionStrategy,
    caption_index: int,
    *,
    accum: str = "float32",
) -> CandidateSet:
    """Candidate set for a single caption."""
    check_compatible(bundle, strategy)
    if not 0 <= caption_index < bundle.n:
        raise ValidationError(
            f"caption index {caption_index} out of range for N={bundle.n}"
        )
    if strategy.kind == "one":
        return CandidateSet(
            caption_index=caption_index,
            image_indices=np.array([caption_index], dtype=np.int64),
        )
    query = bundle.text_vlm if strategy.kind in ("t2i", "t2t") else bundle.image_vlm
    pool = bundle.image_vlm if strategy.kind in ("t2i", "i2i") else bundle.text_vlm
    rows, _ = blocked_topk(
        query.data[caption_index : caption_index + 1],
        pool.data,
        row_k=strategy.k,
        accum=accum,
    )
    return CandidateSet(
        caption_index=caption_index,
        image_indices=_dedup_keep_rank(rows.indices[0]),
    )
