"""Command-line surface: refine, ablate, bench, inspect, oracle-check.

Exit codes: 0 success, 1 data or verification failure, 2 usage error.
Configuration is validated before any input file is opened; outputs are
written atomically. Logs go to standard error, data to files or stdout.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .embstore import load_bundle, read_corpus, read_matrix
from .errors import ConfigError, FormatError, SyncrefError
from .pipeline import (
    PipelineConfig,
    ablate,
    refine,
    stats_path_for,
    write_ablation_csv,
    write_manifest,
    write_stats,
)
from .scoring import SCORER_KINDS, ScorerConfig
from .selection import KINDS, SelectionStrategy
from .synthbench import BenchSpec, generate, oracle_refine, write_planted

_MAX_RANGE_VALUES = 1_000_000


def _one_line(text: str) -> str:
    return " ".join(text.split())


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _as_int(text: str) -> int:
    try:
        value = float(text)
    except ValueError:
        raise ConfigError(f"expected an integer, got {text!r}") from None
    rounded = int(round(value))
    if abs(value - rounded) > 1e-9:
        raise ConfigError(f"expected an integer, got {text!r}")
    return rounded


def _as_float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"expected a number, got {text!r}") from None


def _expand_range(piece: str, cast) -> list:
    """One "a..b", "a..b step s", or "a..b:s" range, both endpoints kept."""
    if " step " in piece:
        span, step_text = piece.split(" step ", 1)
    elif ":" in piece:
        span, step_text = piece.split(":", 1)
    else:
        span, step_text = piece, "1"
    start_text, stop_text = span.split("..", 1)
    start, stop = _as_float(start_text), _as_float(stop_text)
    step = _as_float(step_text)
    if step <= 0:
        raise ConfigError(f"range step must be positive in {piece!r}")
    if stop < start:
        raise ConfigError(f"range stop below start in {piece!r}")
    values = []
    i = 0
    while True:
        value = start + i * step
        if value > stop + step * 1e-9:
            break
        values.append(cast(f"{value:.10g}"))
        i += 1
        if i > _MAX_RANGE_VALUES:
            raise ConfigError(f"range {piece!r} expands to too many values")
    return values


def _scalar_list(tokens: list[str], cast) -> list:
    """Comma-separated values with ".." ranges, given as one or more tokens."""
    text = " ".join(tokens)
    values = []
    for piece in text.split(","):
        piece = piece.strip()
        if not piece:
            continue
        if ".." in piece:
            values.extend(_expand_range(piece, cast))
        else:
            values.append(cast(piece))
    if not values:
        raise ConfigError(f"no values in {text!r}")
    return values


def _name_list(tokens: list[str], allowed: tuple, what: str) -> list[str]:
    values = []
    for piece in " ".join(tokens).split(","):
        piece = piece.strip()
        if not piece:
            continue
        if piece not in allowed:
            raise ConfigError(f"unknown {what} {piece!r} (one of {', '.join(allowed)})")
        values.append(piece)
    if not values:
        raise ConfigError(f"no {what} values given")
    return values


def _add_bundle_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--captions", required=True, help="caption corpus JSON-lines")
    parser.add_argument("--text-vlm", required=True, help="caption VLM embeddings")
    parser.add_argument("--image-vlm", required=True, help="image VLM embeddings")
    parser.add_argument("--text-sent", required=True, help="caption sentence embeddings")
    parser.add_argument(
        "--mmap", action="store_true", help="memory-map embedding payloads"
    )


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--strategy", default="t2i", choices=KINDS, help="candidate selection mode"
    )
    parser.add_argument(
        "--scorer", default="ret", choices=SCORER_KINDS, help="alignment scorer"
    )
    parser.add_argument("-K", type=int, default=15, help="candidates per caption")
    parser.add_argument("--kr", type=int, default=2, help="captions per cycle retrieval")
    parser.add_argument("--tau", type=float, default=0.9, help="kept fraction in [0, 1]")
    _add_runtime_flags(parser)


def _add_runtime_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--workers", type=int, default=1, help="similarity sweep threads")
    parser.add_argument(
        "--accum",
        default="float32",
        choices=("float32", "float64"),
        help="similarity accumulation precision",
    )


def _pipeline_config(args: argparse.Namespace) -> PipelineConfig:
    return PipelineConfig(
        strategy=SelectionStrategy(kind=args.strategy, k=args.K),
        scorer=ScorerConfig(kind=args.scorer, k_r=args.kr),
        tau=args.tau,
        workers=args.workers,
        accum=args.accum,
    )


def _load(args: argparse.Namespace):
    return load_bundle(
        args.captions,
        args.text_vlm,
        args.image_vlm,
        args.text_sent,
        mmap=args.mmap,
    )


def cmd_refine(args: argparse.Namespace) -> int:
    config = _pipeline_config(args)  # validate before any I/O
    bundle = _load(args)
    manifest = refine(bundle, config)
    write_manifest(manifest, args.out)
    write_stats(manifest, stats_path_for(args.out))
    _log(
        f"kept {manifest.stats['n_kept']} of {manifest.stats['n_input']} captions"
        f" -> {args.out}"
    )
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    strategies = _name_list(args.strategies, KINDS, "strategy")
    scorers = _name_list(args.scorers, SCORER_KINDS, "scorer")
    k_values = _scalar_list(args.K_list, _as_int)
    kr_values = _scalar_list(args.kr_list, _as_int)
    tau_values = _scalar_list(args.tau_list, _as_float)
    grid = [
        PipelineConfig(
            strategy=SelectionStrategy(kind=strategy, k=k),
            scorer=ScorerConfig(kind=scorer, k_r=k_r),
            tau=tau,
            workers=args.workers,
            accum=args.accum,
        )
        for strategy in strategies
        for scorer in scorers
        for k in k_values
        for k_r in kr_values
        for tau in tau_values
    ]
    bundle = _load(args)
    rows = ablate(bundle, grid)
    write_ablation_csv(rows, args.out)
    _log(f"wrote {len(rows)} ablation rows -> {args.out}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    spec = BenchSpec(
        n=args.n,
        d=args.d,
        d_s=args.ds,
        sigma_text=args.sigma_text,
        sigma_image=args.sigma_image,
        p_corrupt=args.p_corrupt,
        seed=args.seed,
    )
    planted = generate(spec)
    write_planted(planted, args.out_dir, spec)
    _log(
        f"planted {spec.n} pairs ({int(planted.corrupted.sum())} corrupted)"
        f" -> {args.out_dir}"
    )
    return 0


def _inspect_matrix(path: str) -> dict:
    matrix = read_matrix(path)
    summary = {
        "kind": "matrix",
        "path": str(path),
        "n": matrix.n,
        "d": matrix.d,
        "normalized": matrix.normalized,
    }
    if matrix.n:
        norms = np.linalg.norm(matrix.data.astype(np.float64), axis=1)
        summary["norm_min"] = round(float(norms.min()), 6)
        summary["norm_max"] = round(float(norms.max()), 6)
        summary["first_id"] = matrix.ids[0]
        summary["last_id"] = matrix.ids[-1]
    return summary


def _inspect_corpus(path: str) -> dict:
    corpus = read_corpus(path)
    summary = {"kind": "corpus", "path": str(path), "n": len(corpus)}
    if len(corpus):
        summary["first_id"] = corpus.ids[0]
        summary["last_id"] = corpus.ids[-1]
    return summary


def _inspect_manifest(path: str) -> dict:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: line {line_no}: {exc}") from None
            if row.get("rank") != len(rows) + 1:
                raise FormatError(
                    f"{path}: line {line_no}: rank {row.get('rank')!r},"
                    f" expected {len(rows) + 1}"
                )
            rows.append(row)
    summary = {"kind": "manifest", "path": str(path), "entries": len(rows)}
    if rows:
        scores = [row["score"] for row in rows]
        summary["score_max"] = scores[0]
        summary["score_min"] = scores[-1]
        summary["top"] = rows[0]
    return summary


def cmd_inspect(args: argparse.Namespace) -> int:
    if args.matrix:
        summary = _inspect_matrix(args.matrix)
    elif args.corpus:
        summary = _inspect_corpus(args.corpus)
    else:
        summary = _inspect_manifest(args.manifest)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_oracle_check(args: argparse.Namespace) -> int:
    config = _pipeline_config(args)
    bundle = _load(args)
    fast = refine(bundle, config)
    slow = oracle_refine(bundle, config)
    for rank, (a, b) in enumerate(zip(fast.entries, slow.entries), start=1):
        if (
            a.caption_index != b.caption_index
            or a.image_index != b.image_index
            or abs(a.score - b.score) > args.tolerance
        ):
            _log(
                f"oracle mismatch at rank {rank}:"
                f" engine=({a.caption_index}, {a.image_index}, {a.score:.6f})"
                f" oracle=({b.caption_index}, {b.image_index}, {b.score:.6f})"
            )
            return 1
    _log(f"oracle check passed: {len(fast.entries)} entries compared")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="syncref",
        description="Retrieval-based refinement of synthetic image-caption datasets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = {"formatter_class": argparse.ArgumentDefaultsHelpFormatter}

    p_refine = sub.add_parser(
        "refine", help="score, reassign, and prune one bundle", **fmt
    )
    _add_bundle_flags(p_refine)
    _add_config_flags(p_refine)
    p_refine.add_argument("--out", required=True, help="output manifest path")
    p_refine.set_defaults(func=cmd_refine)

    p_ablate = sub.add_parser("ablate", help="sweep a configuration grid to CSV", **fmt)
    _add_bundle_flags(p_ablate)
    p_ablate.add_argument(
        "--strategies", nargs="+", default=["t2i"], help="comma list of strategies"
    )
    p_ablate.add_argument(
        "--scorers", nargs="+", default=["ret"], help="comma list of scorers"
    )
    p_ablate.add_argument(
        "--K-list", dest="K_list", nargs="+", default=["15"],
        help="comma list or a..b[:step] range",
    )
    p_ablate.add_argument(
        "--kr-list", dest="kr_list", nargs="+", default=["2"],
        help="comma list or a..b[:step] range",
    )
    p_ablate.add_argument(
        "--tau-list", dest="tau_list", nargs="+", default=["0.9"],
        help="comma list or a..b[:step] range",
    )
    _add_runtime_flags(p_ablate)
    p_ablate.add_argument("--out", required=True, help="output CSV path")
    p_ablate.set_defaults(func=cmd_ablate)

    p_bench = sub.add_parser("bench", help="generate a planted synthetic bundle", **fmt)
    p_bench.add_argument("--n", type=int, required=True, help="caption/image pairs")
    p_bench.add_argument("--d", type=int, default=32, help="VLM embedding width")
    p_bench.add_argument("--ds", type=int, default=16, help="sentence embedding width")
    p_bench.add_argument("--sigma-text", type=float, default=0.05, help="caption noise")
    p_bench.add_argument("--sigma-image", type=float, default=0.05, help="image noise")
    p_bench.add_argument(
        "--p-corrupt", type=float, default=0.2, help="mismatched-image probability"
    )
    p_bench.add_argument("--seed", type=int, default=0, help="generator seed")
    p_bench.add_argument("--out-dir", required=True, help="bundle output directory")
    p_bench.set_defaults(func=cmd_bench)

    p_inspect = sub.add_parser("inspect", help="summarize one artifact as JSON", **fmt)
    group = p_inspect.add_mutually_exclusive_group(required=True)
    group.add_argument("--matrix", help="embedding matrix path")
    group.add_argument("--corpus", help="caption corpus path")
    group.add_argument("--manifest", help="refined manifest path")
    p_inspect.set_defaults(func=cmd_inspect)

    p_oracle = sub.add_parser(
        "oracle-check", help="diff the engine against the slow reference refiner", **fmt
    )
    _add_bundle_flags(p_oracle)
    _add_config_flags(p_oracle)
    p_oracle.add_argument(
        "--tolerance", type=float, default=1e-5, help="max per-entry score difference"
    )
    p_oracle.set_defaults(func=cmd_oracle_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        _log(f"error: {type(exc).__name__}: {_one_line(str(exc))}")
        return 2
    except (SyncrefError, OSError) as exc:
        _log(f"error: {type(exc).__name__}: {_one_line(str(exc))}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
