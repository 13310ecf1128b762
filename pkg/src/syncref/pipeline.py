"""End-to-end dataset refinement.

For every caption: select candidate images, score each candidate, keep the
best-scoring one (reassignment), then sort all captions by score and keep
the top floor(N * tau) fraction. The kept prefix becomes the manifest; the
rejected suffix is retained in memory for benchmark audits but never
serialized.

The kept count uses exact integer arithmetic on tau quantized to six
decimal places (the same precision the manifest stores scores at), so
floor(N * tau) never drifts a unit from binary rounding of tau.

When the scorer is "ret", selection and scoring retrieval share one
text-against-images sweep whenever possible (strategy t2i harvests its
candidate rows from the same pass that yields the per-image caption
retrievals), which is what keeps large runs to a single O(N*M*d) pass.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embstore import DatasetBundle, atomic_write
from .errors import ConfigError, ValidationError
from .scoring import ScorerConfig, check_scorer, cycle_retrieval, ret_scores
from .selection import SelectionStrategy, candidate_table, check_compatible
from .simkernel import accum_dtype, score_pairs

TAU_DENOMINATOR = 1_000_000


@dataclass(frozen=True)
class PipelineConfig:
    """Full refinement configuration."""

    strategy: SelectionStrategy
    scorer: ScorerConfig
    tau: float = 0.9
    workers: int = 1
    accum: str = "float32"

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must be in [0, 1], got {self.tau}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        accum_dtype(self.accum)


@dataclass(frozen=True)
class ScoredTriple:
    """One caption's final assignment."""

    image_index: int
    caption_index: int
    score: float


@dataclass(frozen=True)
class RefinedManifest:
    """Refinement result: kept entries, audit-only pruned tail, and stats.

    ``entries`` is the serialized surface; ``pruned`` exists so planted
    benchmarks can audit what was discarded and never reaches disk.
    """

    entries: list[ScoredTriple]
    pruned: list[ScoredTriple]
    caption_ids: list[str]
    image_ids: list[str]
    stats: dict

    def __post_init__(self) -> None:
        if len(self.entries) != self.stats["n_kept"]:
            raise ValidationError(
                f"{len(self.entries)} entries but stats claim {self.stats['n_kept']}"
            )
        ordered = list(self.entries) + list(self.pruned)
        for t in ordered:
            if not (np.isfinite(t.score) and -1.0 <= t.score <= 1.0):
                raise ValidationError(
                    f"score {t.score!r} for caption {t.caption_index} outside [-1, 1]"
                )
        for a, b in zip(ordered, ordered[1:]):
            if a.score < b.score or (
                a.score == b.score and a.caption_index >= b.caption_index
            ):
                raise ValidationError(
                    f"entries out of order at captions {a.caption_index}, {b.caption_index}"
                )


def kept_count(n: int, tau: float) -> int:
    """floor(n * tau), exact for tau given to at most six decimal places."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"tau must be in [0, 1], got {tau}")
    num = round(tau * TAU_DENOMINATOR)
    return (n * num) // TAU_DENOMINATOR


def _empty_manifest(bundle: DatasetBundle, config: PipelineConfig) -> RefinedManifest:
    stats = _stats(config, n_input=0, kept=[], walls={"select": 0.0, "score": 0.0, "sort": 0.0})
    return RefinedManifest(
        entries=[],
        pruned=[],
        caption_ids=bundle.corpus.ids,
        image_ids=list(bundle.image_vlm.ids),
        stats=stats,
    )


def _stats(config: PipelineConfig, n_input: int, kept: list[ScoredTriple], walls: dict) -> dict:
    reassigned = sum(1 for t in kept if t.image_index != t.caption_index)
    multiplicity = 0
    if kept:
        _, counts = np.unique([t.image_index for t in kept], return_counts=True)
        multiplicity = int(counts.max())
    return {
        "n_input": n_input,
        "n_kept": len(kept),
        "tau": round(config.tau, 6),
        "K": config.strategy.k,
        "K_r": config.scorer.k_r,
        "strategy": config.strategy.kind,
        "scorer": config.scorer.kind,
        "reassignment_rate": (reassigned / len(kept)) if kept else 0.0,
        "max_image_multiplicity": multiplicity,
        "wall_time_ms": {k: round(v * 1000.0, 3) for k, v in walls.items()},
    }


def refine(bundle: DatasetBundle, config: PipelineConfig) -> RefinedManifest:
    """Select, score, reassign, sort, and prune one dataset."""
    bundle = bundle.unit_normalized()
    if bundle.n == 0:
        return _empty_manifest(bundle, config)
    check_compatible(bundle, config.strategy)
    check_scorer(bundle, config.scorer)
    n = bundle.n

    t0 = time.perf_counter()
    cols = None
    if config.scorer.kind == "ret":
        row_k = config.strategy.k if config.strategy.kind == "t2i" else None
        rows, cols = cycle_retrieval(
            bundle,
            config.scorer.k_r,
            row_k=row_k,
            accum=config.accum,
            workers=config.workers,
        )
        if config.strategy.kind == "t2i":
            table = rows.indices
        else:
            table = candidate_table(
                bundle, config.strategy, accum=config.accum, workers=config.workers
            )
    else:
        table = candidate_table(
            bundle, config.strategy, accum=config.accum, workers=config.workers
        )
    t1 = time.perf_counter()

    flat_cap = np.repeat(np.arange(n, dtype=np.int64), table.shape[1])
    flat_img = table.reshape(-1)
    if config.scorer.kind == "ret":
        flat_scores = ret_scores(
            bundle, flat_cap, flat_img, cols.indices, accum=config.accum
        )
    else:
        flat_scores = score_pairs(
            flat_cap, bundle.text_vlm, flat_img, bundle.image_vlm, accum=config.accum
        )
    scores = flat_scores.reshape(n, table.shape[1])
    if not np.all(np.isfinite(scores)):
        raise ValidationError("non-finite alignment score produced")
    best = scores.max(axis=1)
    pos = (scores == best[:, None]).argmax(axis=1)  # first max = best rank
    assigned = table[np.arange(n), pos]
    t2 = time.perf_counter()

    order = np.lexsort((np.arange(n), -best))
    kc = kept_count(n, config.tau)
    triples = [
        ScoredTriple(
            image_index=int(assigned[i]), caption_index=int(i), score=float(best[i])
        )
        for i in order
    ]
    t3 = time.perf_counter()

    walls = {"select": t1 - t0, "score": t2 - t1, "sort": t3 - t2}
    stats = _stats(config, n_input=n, kept=triples[:kc], walls=walls)
    return RefinedManifest(
        entries=triples[:kc],
        pruned=triples[kc:],
        caption_ids=bundle.corpus.ids,
        image_ids=list(bundle.image_vlm.ids),
        stats=stats,
    )


def refine_one_to_one(
    bundle: DatasetBundle,
    scorer: ScorerConfig,
    tau: float,
    *,
    workers: int = 1,
    accum: str = "float32",
) -> RefinedManifest:
    """Pure per-pair filtering: no reassignment, each caption keeps its own
    image; equivalent to refine with strategy "one"."""
    config = PipelineConfig(
        strategy=SelectionStrategy(kind="one"),
        scorer=scorer,
        tau=tau,
        workers=workers,
        accum=accum,
    )
    return refine(bundle, config)


ABLATION_COLUMNS = (
    "strategy",
    "scorer",
    "K",
    "K_r",
    "tau",
    "n_kept",
    "mean_score",
    "min_kept_score",
    "reassignment_rate",
    "wall_time",
)


def ablate(bundle: DatasetBundle, grid: list[PipelineConfig]) -> list[dict]:
    """Run refine once per config; one summary row per config, grid order."""
    if not grid:
        raise ConfigError("ablation grid is empty")
    out = []
    for config in grid:
        t0 = time.perf_counter()
        manifest = refine(bundle, config)
        wall = time.perf_counter() - t0
        kept = [t.score for t in manifest.entries]
        out.append(
            {
                "strategy": config.strategy.kind,
                "scorer": config.scorer.kind,
                "K": config.strategy.k,
                "K_r": config.scorer.k_r,
                "tau": round(config.tau, 6),
                "n_kept": len(kept),
                "mean_score": (sum(kept) / len(kept)) if kept else None,
                "min_kept_score": kept[-1] if kept else None,
                "reassignment_rate": manifest.stats["reassignment_rate"],
                "wall_time": wall,
            }
        )
    return out


def write_manifest(manifest: RefinedManifest, path: str | Path) -> None:
    """Serialize kept entries as JSON-lines, rank 1 first, scores at six
    fractional digits; written atomically."""
    lines = []
    for rank, t in enumerate(manifest.entries, start=1):
        cid = json.dumps(manifest.caption_ids[t.caption_index], ensure_ascii=False)
        iid = json.dumps(manifest.image_ids[t.image_index], ensure_ascii=False)
        lines.append(
            f'{{"rank": {rank}, "caption_id": {cid}, "image_id": {iid}, '
            f'"score": {t.score:.6f}}}\n'
        )
    blob = "".join(lines).encode("utf-8")
    atomic_write(Path(path), lambda fh: fh.write(blob))


def write_stats(manifest: RefinedManifest, path: str | Path) -> None:
    blob = (json.dumps(manifest.stats, indent=2) + "\n").encode("utf-8")
    atomic_write(Path(path), lambda fh: fh.write(blob))


def stats_path_for(manifest_path: str | Path) -> Path:
    p = Path(manifest_path)
    return p.with_name(p.name + ".stats.json")


def write_ablation_csv(rows: list[dict], path: str | Path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ABLATION_COLUMNS)
    for row in rows:
        writer.writerow(
            [
                row["strategy"],
                row["scorer"],
                row["K"],
                row["K_r"],
                f"{row['tau']:.6f}",
                row["n_kept"],
                "" if row["mean_score"] is None else f"{row['mean_score']:.6f}",
                "" if row["min_kept_score"] is None else f"{row['min_kept_score']:.6f}",
                f"{row['reassignment_rate']:.6f}",
                f"{row['wall_time']:.6f}",
            ]
        )
    blob = buf.getvalue().encode("utf-8")
    atomic_write(Path(path), lambda fh: fh.write(blob))
