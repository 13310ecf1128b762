"""Command-line entry point for caption and image embedding extraction.

Exit codes: 0 success, 1 input or model failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .encoders import DEFAULT_SENTENCE, DEFAULT_VLM
from .errors import InputError, ModelError, UsageError
from .jobs import ExtractJob, extract_images, extract_text


def _one_line(message: str) -> str:
    return " ".join(str(message).split())


def build_parser() -> argparse.ArgumentParser:
    fmt = {"formatter_class": argparse.ArgumentDefaultsHelpFormatter}
    parser = argparse.ArgumentParser(
        prog="sync-extract",
        description="Encode captions and images into embedding bundles.",
        **fmt,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    text = sub.add_parser(
        "text", help="encode captions with the VLM text and sentence encoders", **fmt
    )
    text.add_argument("--captions", required=True, help="caption JSON-lines file")
    text.add_argument("--out", required=True, help="output directory")
    text.add_argument("--model", default=DEFAULT_VLM, help="VLM text encoder name")
    text.add_argument(
        "--sentence-model", default=DEFAULT_SENTENCE, help="sentence encoder name"
    )
    text.add_argument("--batch", type=int, default=32, help="encoding batch size")
    text.add_argument("--device", default="cpu", help="device for pretrained models")
    text.set_defaults(func=cmd_text)

    images = sub.add_parser(
        "images", help="encode one image per caption ID with the VLM image encoder",
        **fmt,
    )
    images.add_argument("--captions", required=True, help="caption JSON-lines file")
    images.add_argument("--images", required=True, help="directory of image files")
    images.add_argument("--out", required=True, help="output directory")
    images.add_argument("--model", default=DEFAULT_VLM, help="VLM image encoder name")
    images.add_argument("--batch", type=int, default=32, help="encoding batch size")
    images.add_argument("--device", default="cpu", help="device for pretrained models")
    images.add_argument(
        "--skip-missing",
        action="store_true",
        help="drop captions whose image is missing or unreadable instead of failing",
    )
    images.set_defaults(func=cmd_images)
    return parser


def cmd_text(args: argparse.Namespace) -> int:
    job = ExtractJob(
        captions=Path(args.captions),
        out_dir=Path(args.out),
        vlm_model=args.model,
        sentence_model=args.sentence_model,
        batch=args.batch,
        device=args.device,
    )
    result = extract_text(job)
    for path in result.paths:
        print(f"wrote {path} ({result.n_rows} rows)", file=sys.stderr)
    return 0


def cmd_images(args: argparse.Namespace) -> int:
    job = ExtractJob(
        captions=Path(args.captions),
        out_dir=Path(args.out),
        images=Path(args.images),
        vlm_model=args.model,
        batch=args.batch,
        device=args.device,
        skip_missing=args.skip_missing,
    )
    result = extract_images(job)
    for path in result.paths:
        print(f"wrote {path} ({result.n_rows} rows)", file=sys.stderr)
    if result.skipped_ids:
        print(f"skipped {len(result.skipped_ids)} captions", file=sys.stderr)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {_one_line(str(exc))}", file=sys.stderr)
        return 2
    except (InputError, ModelError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {_one_line(str(exc))}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
