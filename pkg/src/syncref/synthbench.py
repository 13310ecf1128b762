"""Planted-alignment benchmark generator and brute-force reference refiner.

Every embedding in a generated bundle derives from a known latent vector,
so ground truth exists for which image belongs to which caption. Latent
assignments are stored alongside the bundle: uncorrupted image i embeds
latent i; a corrupted image embeds some other caption's latent, modeling a
generated image that depicts the wrong content.

Reproducibility: all randomness comes from the Philox counter-based
generator keyed by the seed, consumed through one pinned recipe so any
implementation can replay it:

    1. raw 64-bit words -> uniforms: u = ((raw >> 11) + 1) * 2^-53 for the
       Box-Muller radius (never zero), u = (raw >> 11) * 2^-53 elsewhere;
    2. gaussians via Box-Muller, pairs interleaved as
       (r*cos(theta), r*sin(theta)) with r = sqrt(-2 ln u1),
       theta = 2*pi*u2, truncated to the requested count;
    3. draw order: latents (n*d), text noise (n*d), projection (d*d_s,
       scaled by 1/sqrt(d)), sentence noise (n*d_s), corruption uniforms
       (n), swap targets (n raw words, target = raw mod (n-1), mapped to
       skip self), image noise (n*d). Swap targets are drawn for every row
       and used only where the corruption coin landed, so streams never
       shift with p_corrupt.

The reference refiner recomputes the whole pipeline contract with naive
full sorts and float64 scalar products, no shared kernel code, and refuses
datasets beyond 2000 captions.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .embstore import (
    CaptionCorpus,
    DatasetBundle,
    EmbeddingMatrix,
    atomic_write,
    write_corpus,
    write_matrix,
)
from .errors import ConfigError, SizeGuardError, ValidationError
from .pipeline import (
    PipelineConfig,
    RefinedManifest,
    ScoredTriple,
    _stats,
    kept_count,
)
from .scoring import check_scorer
from .selection import check_compatible

ORACLE_MAX_N = 2000


@dataclass(frozen=True)
class BenchSpec:
    """Shape, noise, and corruption of one planted dataset."""

    n: int
    d: int = 32
    d_s: int = 16
    sigma_text: float = 0.05
    sigma_image: float = 0.05
    p_corrupt: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n < 2:
            raise ConfigError(f"planted datasets need n >= 2, got {self.n}")
        if self.d < 1 or self.d_s < 1:
            raise ConfigError(f"dimensions must be positive, got d={self.d}, d_s={self.d_s}")
        if self.sigma_text < 0 or self.sigma_image < 0:
            raise ConfigError("noise scales must be non-negative")
        if not 0.0 <= self.p_corrupt <= 1.0:
            raise ConfigError(f"p_corrupt must be in [0, 1], got {self.p_corrupt}")


@dataclass(frozen=True)
class PlantedBundle:
    """A generated bundle plus its ground-truth latent assignment."""

    bundle: DatasetBundle
    truth: np.ndarray  # latent index embedded by each image row
    corrupted: np.ndarray  # per-row corruption flag

    def __post_init__(self) -> None:
        truth = np.asarray(self.truth, dtype=np.int64)
        corrupted = np.asarray(self.corrupted, dtype=bool)
        if truth.shape != (self.bundle.m,) or corrupted.shape != (self.bundle.m,):
            raise ValidationError("truth arrays must have one entry per image")
        if not np.array_equal(corrupted, truth != np.arange(self.bundle.m)):
            raise ValidationError("corruption flags disagree with latent assignment")
        object.__setattr__(self, "truth", truth)
        object.__setattr__(self, "corrupted", corrupted)


class _PhiloxStream:
    """Seed-keyed raw word stream with the pinned uniform/gaussian recipes."""

    def __init__(self, seed: int) -> None:
        self._bits = np.random.Philox(key=seed)

    def raw(self, count: int) -> np.ndarray:
        if count == 0:
            return np.empty(0, dtype=np.uint64)
        return self._bits.random_raw(count)

    def uniforms(self, count: int) -> np.ndarray:
        return (self.raw(count) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def gaussians(self, count: int) -> np.ndarray:
        pairs = (count + 1) // 2
        u1 = ((self.raw(pairs) >> np.uint64(11)) + np.uint64(1)).astype(
            np.float64
        ) * 2.0**-53
        u2 = (self.raw(pairs) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        radius = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = radius * np.cos(theta)
        out[1::2] = radius * np.sin(theta)
        return out[:count]


def _unit_rows(mat: np.ndarray) -> np.ndarray:
    return mat / np.linalg.norm(mat, axis=1, keepdims=True)


def generate(spec: BenchSpec) -> PlantedBundle:
    """Deterministically generate one planted bundle from the parameters."""
    stream = _PhiloxStream(spec.seed)
    n, d, d_s = spec.n, spec.d, spec.d_s

    latents = _unit_rows(stream.gaussians(n * d).reshape(n, d))
    text_noise = stream.gaussians(n * d).reshape(n, d)
    projection = stream.gaussians(d * d_s).reshape(d, d_s) / np.sqrt(d)
    sent_noise = stream.gaussians(n * d_s).reshape(n, d_s)
    corrupt_coin = stream.uniforms(n)
    swap_raw = stream.raw(n)
    image_noise = stream.gaussians(n * d).reshape(n, d)

    corrupted = corrupt_coin < spec.p_corrupt
    swap = (swap_raw % np.uint64(n - 1)).astype(np.int64)
    rows = np.arange(n, dtype=np.int64)
    swap = np.where(swap >= rows, swap + 1, swap)  # uniform over indices != i
    truth = np.where(corrupted, swap, rows)

    text_vlm = _unit_rows(latents + spec.sigma_text * text_noise)
    text_sent = _unit_rows(latents @ projection + spec.sigma_text * sent_noise)
    image_vlm = _unit_rows(latents[truth] + spec.sigma_image * image_noise)

    cap_ids = [f"c{i:06d}" for i in range(n)]
    img_ids = [f"i{i:06d}" for i in range(n)]
    bundle = DatasetBundle(
        corpus=CaptionCorpus(
            records=[(cid, f"synthetic caption {i:06d}") for i, cid in enumerate(cap_ids)]
        ),
        text_vlm=EmbeddingMatrix(
            data=text_vlm.astype(np.float32), ids=cap_ids, normalized=True
        ),
        image_vlm=EmbeddingMatrix(
            data=image_vlm.astype(np.float32), ids=img_ids, normalized=True
        ),
        text_sent=EmbeddingMatrix(
            data=text_sent.astype(np.float32), ids=list(cap_ids), normalized=True
        ),
    )
    return PlantedBundle(bundle=bundle, truth=truth, corrupted=corrupted)


BUNDLE_FILES = {
    "corpus": "captions.jsonl",
    "text_vlm": "text_vlm.emb",
    "image_vlm": "image_vlm.emb",
    "text_sent": "text_sent.emb",
    "truth": "truth.json",
}


def write_planted(planted: PlantedBundle, out_dir: str | Path, spec: BenchSpec) -> None:
    """Write the bundle files plus the ground-truth sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_corpus(planted.bundle.corpus, out / BUNDLE_FILES["corpus"])
    write_matrix(planted.bundle.text_vlm, out / BUNDLE_FILES["text_vlm"])
    write_matrix(planted.bundle.image_vlm, out / BUNDLE_FILES["image_vlm"])
    write_matrix(planted.bundle.text_sent, out / BUNDLE_FILES["text_sent"])
    payload = {
        "spec": asdict(spec),
        "truth": planted.truth.tolist(),
        "corrupted": planted.corrupted.astype(int).tolist(),
    }
    blob = (json.dumps(payload, indent=2) + "\n").encode("utf-8")
    atomic_write(out / BUNDLE_FILES["truth"], lambda fh: fh.write(blob))


@dataclass(frozen=True)
class AuditReport:
    """Ground-truth quality of one refinement run."""

    match_rate: float  # kept entries assigned a latent-matching image
    rescue_rate: float  # corrupted captions kept with a matching image
    purge_precision: float  # pruned captions that deserved pruning
    n_kept: int
    n_pruned: int
    n_corrupted: int


def audit(planted: PlantedBundle, manifest: RefinedManifest) -> AuditReport:
    """Score a manifest against the planted ground truth."""
    bundle = planted.bundle
    if (
        manifest.caption_ids != bundle.corpus.ids
        or manifest.image_ids != list(bundle.image_vlm.ids)
    ):
        raise ValidationError("manifest IDs do not match the planted bundle")
    truth = planted.truth

    kept_matched = sum(
        1 for t in manifest.entries if truth[t.image_index] == t.caption_index
    )
    match_rate = kept_matched / len(manifest.entries) if manifest.entries else 0.0

    corrupted_captions = {int(i) for i in np.flatnonzero(planted.corrupted)}
    rescued = sum(
        1
        for t in manifest.entries
        if t.caption_index in corrupted_captions
        and truth[t.image_index] == t.caption_index
    )
    rescue_rate = rescued / len(corrupted_captions) if corrupted_captions else 0.0

    deserved = sum(
        1
        for t in manifest.pruned
        if t.caption_index in corrupted_captions
        and truth[t.image_index] != t.caption_index
    )
    purge_precision = deserved / len(manifest.pruned) if manifest.pruned else 0.0

    return AuditReport(
        match_rate=match_rate,
        rescue_rate=rescue_rate,
        purge_precision=purge_precision,
        n_kept=len(manifest.entries),
        n_pruned=len(manifest.pruned),
        n_corrupted=len(corrupted_captions),
    )


def _clamp(v: float) -> float:
    return min(1.0, max(-1.0, v))


def _full_rank(sims_row: np.ndarray, k: int) -> list[int]:
    order = np.lexsort((np.arange(sims_row.size), -sims_row))
    return [int(j) for j in order[:k]]


def oracle_refine(bundle: DatasetBundle, config: PipelineConfig) -> RefinedManifest:
    """Reference refinement: float64, full sorts, scalar loops, no shared
    kernel code. Guarded to small datasets."""
    if bundle.n > ORACLE_MAX_N:
        raise SizeGuardError(
            f"reference refiner is limited to {ORACLE_MAX_N} captions, got {bundle.n}"
        )
    bundle = bundle.unit_normalized()
    n, m = bundle.n, bundle.m
    if n == 0:
        return RefinedManifest(
            entries=[],
            pruned=[],
            caption_ids=bundle.corpus.ids,
            image_ids=list(bundle.image_vlm.ids),
            stats=_stats(config, 0, [], {"select": 0.0, "score": 0.0, "sort": 0.0}),
        )
    check_compatible(bundle, config.strategy)
    check_scorer(bundle, config.scorer)

    text = bundle.text_vlm.data.astype(np.float64)
    image = bundle.image_vlm.data.astype(np.float64)
    sent = bundle.text_sent.data.astype(np.float64)
    kind, k = config.strategy.kind, config.strategy.k

    candidates: list[list[int]] = []
    if kind == "one":
        candidates = [[i] for i in range(n)]
    else:
        if kind == "t2i":
            sims = text @ image.T
        elif kind == "t2t":
            sims = text @ text.T
        elif kind == "i2t":
            sims = image @ text.T
        else:  # i2i
            sims = image @ image.T
        candidates = [_full_rank(sims[i], k) for i in range(n)]

    if config.scorer.kind == "ret":
        i2t = image @ text.T
        retrieved = [_full_rank(i2t[c], config.scorer.k_r) for c in range(m)]

    def pair_score(i: int, c: int) -> float:
        if config.scorer.kind == "cos":
            return _clamp(float(text[i] @ image[c]))
        best = -1.0
        for r in retrieved[c]:
            s = 1.0 if r == i else _clamp(float(sent[i] @ sent[r]))
            best = max(best, s)
        return best

    assigned = np.empty(n, dtype=np.int64)
    best_scores = np.empty(n, dtype=np.float64)
    for i in range(n):
        best_c, best_s = candidates[i][0], pair_score(i, candidates[i][0])
        for c in candidates[i][1:]:
            s = pair_score(i, c)
            if s > best_s:
                best_c, best_s = c, s
        assigned[i] = best_c
        best_scores[i] = best_s

    order = sorted(range(n), key=lambda i: (-best_scores[i], i))
    kc = kept_count(n, config.tau)
    triples = [
        ScoredTriple(
            image_index=int(assigned[i]), caption_index=i, score=float(best_scores[i])
        )
        for i in order
    ]
    stats = _stats(
        config, n, triples[:kc], {"select": 0.0, "score": 0.0, "sort": 0.0}
    )
    return RefinedManifest(
        entries=triples[:kc],
        pruned=triples[kc:],
        caption_ids=bundle.corpus.ids,
        image_ids=list(bundle.image_vlm.ids),
        stats=stats,
    )
