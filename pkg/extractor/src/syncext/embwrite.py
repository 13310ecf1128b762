"""SYNCEMB1 emission and caption-corpus ingestion.

Output layout (little-endian regardless of host):

    bytes 0-7    ASCII magic "SYNCEMB1"
    bytes 8-15   n, unsigned 64-bit LE
    bytes 16-19  d, unsigned 32-bit LE
    bytes 20-23  flags, unsigned 32-bit LE (bit 0 = rows are L2-normalized)
    bytes 24-    n*d IEEE-754 binary32 values, LE, row-major

Row IDs go to a sidecar at "<path>.ids": UTF-8, one ID per line, exactly n
lines. Caption corpora are JSON-lines whose records carry exactly the
fields "id" and "text".
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import InputError

MAGIC = b"SYNCEMB1"
FLAG_NORMALIZED = 0x1


def atomic_write(path: Path, blob: bytes) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def l2_normalize(rows: np.ndarray, labels: list[str]) -> np.ndarray:
    """Unit-normalize rows in float64, returning float32.

    ``labels`` name the rows in error messages.
    """
    data = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        bad = int(np.argwhere(~np.isfinite(data))[0][0])
        raise InputError(f"encoder produced a non-finite embedding for {labels[bad]!r}")
    norms = np.linalg.norm(data, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise InputError(f"encoder produced a zero embedding for {labels[int(zero[0])]!r}")
    return (data / norms[:, None]).astype(np.float32)


def write_embeddings(path: str | Path, data: np.ndarray, ids: list[str]) -> None:
    """Emit one normalized SYNCEMB1 file plus its ID sidecar."""
    path = Path(path)
    data = np.ascontiguousarray(data, dtype="<f4")
    if data.ndim != 2 or data.shape[0] != len(ids):
        raise InputError(
            f"{path.name}: {len(ids)} IDs for embedding shape {data.shape}"
        )
    for ident in ids:
        if not ident or "\n" in ident or "\r" in ident:
            raise InputError(
                f"{path.name}: row ID {ident!r} is empty or contains a newline"
            )
    header = MAGIC + struct.pack("<QII", data.shape[0], data.shape[1], FLAG_NORMALIZED)
    atomic_write(path, header + data.tobytes())
    sidecar = "".join(ident + "\n" for ident in ids).encode("utf-8")
    atomic_write(path.with_name(path.name + ".ids"), sidecar)


def read_captions(path: str | Path) -> list[tuple[str, str]]:
    """Parse a caption corpus, preserving record order."""
    records: list[tuple[str, str]] = []
    seen: set[str] = set()
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read caption corpus: {exc}") from None
    with fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}: line {line_no}: {exc}") from None
            if not isinstance(record, dict) or set(record) != {"id", "text"}:
                raise InputError(
                    f"{path}: line {line_no}: records need exactly the fields"
                    " 'id' and 'text'"
                )
            ident, text = record["id"], record["text"]
            if not isinstance(ident, str) or not ident:
                raise InputError(f"{path}: line {line_no}: missing or empty id")
            if not isinstance(text, str) or not text:
                raise InputError(f"{path}: line {line_no}: missing or empty text")
            if ident in seen:
                raise InputError(f"{path}: line {line_no}: duplicate id {ident!r}")
            seen.add(ident)
            records.append((ident, text))
    if not records:
        raise InputError(f"{path}: caption corpus is empty")
    return records
