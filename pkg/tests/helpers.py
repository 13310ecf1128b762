"""Shared fixtures for building small bundles by hand."""

from __future__ import annotations

import numpy as np

from syncref.embstore import CaptionCorpus, DatasetBundle, EmbeddingMatrix
from syncref.synthbench import BenchSpec, PlantedBundle, generate


def unit(rows) -> np.ndarray:
    """Float32 matrix with rows scaled to unit norm."""
    data = np.asarray(rows, dtype=np.float64)
    data = data / np.linalg.norm(data, axis=1, keepdims=True)
    return data.astype(np.float32)


def make_bundle(text, image, sent) -> DatasetBundle:
    """Bundle from row lists; rows are normalized, IDs are positional."""
    text, image, sent = unit(text), unit(image), unit(sent)
    n, m = text.shape[0], image.shape[0]
    cap_ids = [f"c{i}" for i in range(n)]
    return DatasetBundle(
        corpus=CaptionCorpus(records=[(c, f"caption {c}") for c in cap_ids]),
        text_vlm=EmbeddingMatrix(data=text, ids=cap_ids, normalized=True),
        image_vlm=EmbeddingMatrix(
            data=image, ids=[f"i{j}" for j in range(m)], normalized=True
        ),
        text_sent=EmbeddingMatrix(data=sent, ids=list(cap_ids), normalized=True),
    )


def planted(n: int = 120, seed: int = 0, **kw) -> PlantedBundle:
    return generate(BenchSpec(n=n, seed=seed, **kw))
