"""Binary embedding storage, ID sidecars, and caption-corpus ingestion.

On-disk layout (bit-exact, little-endian regardless of host):

    bytes 0-7    ASCII magic "SYNCEMB1"
    bytes 8-15   n, unsigned 64-bit LE
    bytes 16-19  d, unsigned 32-bit LE
    bytes 20-23  flags, unsigned 32-bit LE (bit 0 = rows are L2-normalized,
                 all other bits reserved and must be zero)
    bytes 24-    n*d IEEE-754 binary32 values, LE, row-major

Row IDs live in a sidecar at "<path>.ids": UTF-8, one ID per line, exactly
n lines, no trailing blank line. Caption corpora are JSON-lines files whose
lines are objects with exactly the fields "id" and "text".

Everything returned from this module is immutable after load and safe to
share across worker threads.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, FormatError, ValidationError

MAGIC = b"SYNCEMB1"
HEADER_LEN = 24
FLAG_NORMALIZED = 0x1
NORM_TOLERANCE = 1e-4

# Row block for streaming scans so huge matrices never need a second copy.
_SCAN_BLOCK = 65536


def _row_norms(data: np.ndarray, block: int = _SCAN_BLOCK) -> np.ndarray:
    """L2 norm per row, accumulated in float64, computed blockwise."""
    n = data.shape[0]
    out = np.empty(n, dtype=np.float64)
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        chunk = np.asarray(data[lo:hi], dtype=np.float64)
        out[lo:hi] = np.sqrt(np.einsum("ij,ij->i", chunk, chunk))
    return out


def _check_finite(data: np.ndarray, context: str, block: int = _SCAN_BLOCK) -> None:
    n = data.shape[0]
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        chunk = data[lo:hi]
        if not np.all(np.isfinite(chunk)):
            bad = np.argwhere(~np.isfinite(chunk))[0]
            raise ValidationError(
                f"{context}: non-finite value at row {lo + int(bad[0])}, column {int(bad[1])}"
            )


def _check_ids(ids: list[str], n: int, context: str) -> None:
    if len(ids) != n:
        raise ValidationError(f"{context}: {len(ids)} IDs for {n} rows")
    seen: set[str] = set()
    for row, ident in enumerate(ids):
        if not ident:
            raise ValidationError(f"{context}: empty ID at row {row}")
        if "\n" in ident or "\r" in ident:
            raise ValidationError(f"{context}: ID at row {row} contains a line break")
        if ident in seen:
            raise ValidationError(f"{context}: duplicate ID {ident!r} at row {row}")
        seen.add(ident)


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """Dense n x d float32 matrix with per-row string IDs.

    ``normalized`` asserts every row has unit L2 norm (within 1e-4). The
    underlying array is marked read-only; treat instances as immutable.
    """

    data: np.ndarray
    ids: list[str]
    normalized: bool = False

    def __eq__(self, other: object) -> bool:
        """Bit-exact equality: shape, payload bytes, IDs, and flag."""
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        return (
            self.normalized == other.normalized
            and self.ids == other.ids
            and self.data.shape == other.data.shape
            and np.array_equal(
                self.data.view(np.uint32), other.data.view(np.uint32)
            )
        )

    def __post_init__(self) -> None:
        data = self.data
        if data.ndim != 2:
            raise ValidationError(f"embedding data must be 2-D, got shape {data.shape}")
        if data.dtype != np.float32:
            raise ValidationError(f"embedding data must be float32, got {data.dtype}")
        if data.shape[1] < 1:
            raise ValidationError("embedding dimension must be positive")
        _check_finite(data, "embedding matrix")
        _check_ids(self.ids, data.shape[0], "embedding matrix")
        if self.normalized and data.shape[0]:
            norms = _row_norms(data)
            worst = int(np.argmax(np.abs(norms - 1.0)))
            if abs(norms[worst] - 1.0) > NORM_TOLERANCE:
                raise ValidationError(
                    f"normalized flag set but row {worst} has L2 norm {norms[worst]:.6g}"
                )
        if data.flags.writeable:
            try:
                data.flags.writeable = False
            except ValueError:
                pass  # views of foreign buffers stay as-is

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def unit_normalized(self) -> "EmbeddingMatrix":
        """Copy with rows scaled to unit L2 norm (no-op if already flagged)."""
        if self.normalized:
            return self
        norms = _row_norms(self.data)
        zero = np.flatnonzero(norms == 0.0)
        if zero.size:
            raise DegenerateInputError(
                f"cannot normalize zero-norm row {int(zero[0])}"
            )
        out = np.empty_like(self.data)
        for lo in range(0, self.n, _SCAN_BLOCK):
            hi = min(lo + _SCAN_BLOCK, self.n)
            out[lo:hi] = (
                self.data[lo:hi].astype(np.float64) / norms[lo:hi, None]
            ).astype(np.float32)
        return EmbeddingMatrix(data=out, ids=list(self.ids), normalized=True)


@dataclass(frozen=True)
class CaptionCorpus:
    """Ordered caption records; record order defines the caption index."""

    records: list[tuple[str, str]]

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for row, (ident, text) in enumerate(self.records):
            if not ident:
                raise ValidationError(f"caption corpus: empty ID at record {row}")
            if not text:
                raise ValidationError(f"caption corpus: empty text at record {row} ({ident!r})")
            if ident in seen:
                raise ValidationError(f"caption corpus: duplicate ID {ident!r} at record {row}")
            seen.add(ident)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [ident for ident, _ in self.records]

    @property
    def texts(self) -> list[str]:
        return [text for _, text in self.records]


@dataclass(frozen=True)
class DatasetBundle:
    """A corpus plus its three aligned embedding matrices.

    text_vlm and text_sent are row-aligned with the corpus; image_vlm may
    have a different row count M. When M == N, image row j is understood as
    the image generated from caption j. All matrices are unit-normalized on
    load so similarity reduces to a plain dot product.
    """

    corpus: CaptionCorpus
    text_vlm: EmbeddingMatrix
    image_vlm: EmbeddingMatrix
    text_sent: EmbeddingMatrix

    def __post_init__(self) -> None:
        n = len(self.corpus)
        if self.text_vlm.n != n:
            raise ValidationError(
                f"text VLM matrix has {self.text_vlm.n} rows but corpus has {n} captions"
            )
        if self.text_sent.n != n:
            raise ValidationError(
                f"sentence matrix has {self.text_sent.n} rows but corpus has {n} captions"
            )
        if self.text_vlm.d != self.image_vlm.d:
            raise ValidationError(
                f"text VLM dimension {self.text_vlm.d} != image VLM dimension {self.image_vlm.d}"
            )
        for name, mat in (("text VLM", self.text_vlm), ("sentence", self.text_sent)):
            for row, (want, got) in enumerate(zip(self.corpus.ids, mat.ids)):
                if want != got:
                    raise ValidationError(
                        f"{name} matrix IDs misaligned with corpus at row {row}: "
                        f"expected {want!r}, found {got!r}"
                    )

    @property
    def n(self) -> int:
        return len(self.corpus)

    @property
    def m(self) -> int:
        return self.image_vlm.n

    @property
    def paired(self) -> bool:
        """True when every caption has a positionally paired image."""
        return self.m == self.n

    def unit_normalized(self) -> "DatasetBundle":
        """Bundle with every matrix unit-normalized; self if already done."""
        if (
            self.text_vlm.normalized
            and self.image_vlm.normalized
            and self.text_sent.normalized
        ):
            return self
        return DatasetBundle(
            corpus=self.corpus,
            text_vlm=self.text_vlm.unit_normalized(),
            image_vlm=self.image_vlm.unit_normalized(),
            text_sent=self.text_sent.unit_normalized(),
        )


def atomic_write(path: Path, payload_writer) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            payload_writer(fh)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def write_matrix(matrix: EmbeddingMatrix, path: str | Path) -> None:
    """Write a matrix plus its ID sidecar; round-trips bit-exactly."""
    path = Path(path)
    flags = FLAG_NORMALIZED if matrix.normalized else 0
    data = np.ascontiguousarray(matrix.data, dtype="<f4")

    def emit(fh) -> None:
        fh.write(MAGIC)
        fh.write(struct.pack("<QII", matrix.n, matrix.d, flags))
        fh.write(data.tobytes())

    atomic_write(path, emit)

    ids_blob = "".join(ident + "\n" for ident in matrix.ids).encode("utf-8")
    atomic_write(_ids_path(path), lambda fh: fh.write(ids_blob))


def _ids_path(path: Path) -> Path:
    return path.with_name(path.name + ".ids")


def _read_ids(path: Path, n: int) -> list[str]:
    if not path.exists():
        raise FormatError(f"{path}: ID sidecar missing")
    text = path.read_bytes().decode("utf-8")
    if text == "":
        ids: list[str] = []
    else:
        lines = text.split("\n")
        if lines[-1] == "":
            lines.pop()
        ids = lines
    if len(ids) != n:
        raise FormatError(f"{path}: {len(ids)} IDs but matrix declares {n} rows")
    return ids


def read_matrix(
    path: str | Path,
    *,
    mmap: bool = False,
    verify_norms: bool = True,
) -> EmbeddingMatrix:
    """Read a SYNCEMB1 file and its ID sidecar.

    With ``mmap=True`` the payload is memory-mapped read-only instead of
    loaded eagerly; observable values are identical. Validation is total:
    any header or payload defect raises and nothing partial escapes.
    """
    path = Path(path)
    size = path.stat().st_size
    if size < HEADER_LEN:
        raise FormatError(f"{path}: file shorter than the {HEADER_LEN}-byte header")
    with open(path, "rb") as fh:
        header = fh.read(HEADER_LEN)
        magic = header[:8]
        if magic != MAGIC:
            if magic[:7] == MAGIC[:7]:
                raise FormatError(
                    f"{path}: format version mismatch (found {magic!r}, expected {MAGIC!r})"
                )
            raise FormatError(f"{path}: bad magic {magic!r}")
        n, d, flags = struct.unpack("<QII", header[8:HEADER_LEN])
        if d < 1:
            raise FormatError(f"{path}: dimension must be positive, found {d}")
        if flags & ~FLAG_NORMALIZED:
            raise FormatError(f"{path}: reserved flag bits set (flags=0x{flags:x})")
        expected = n * d * 4
        present = size - HEADER_LEN
        if present < expected:
            raise FormatError(
                f"{path}: truncated payload, declares n={n} d={d} "
                f"(needs {expected} bytes) but only {present} present"
            )
        if present > expected:
            raise FormatError(
                f"{path}: {present - expected} trailing bytes after the declared payload"
            )
        if mmap and n > 0:
            data = np.memmap(path, dtype="<f4", mode="r", offset=HEADER_LEN, shape=(n, d))
        else:
            raw = fh.read(expected)
            data = np.frombuffer(raw, dtype="<f4").reshape(n, d)

    normalized = bool(flags & FLAG_NORMALIZED)
    ids = _read_ids(_ids_path(path), n)
    if normalized and not verify_norms:
        # Trust the flag; invariant checks still cover finiteness and IDs.
        matrix = EmbeddingMatrix(data=data, ids=ids, normalized=False)
        object.__setattr__(matrix, "normalized", True)
        return matrix
    return EmbeddingMatrix(data=data, ids=ids, normalized=normalized)


def write_corpus(corpus: CaptionCorpus, path: str | Path) -> None:
    """Write a caption corpus as JSON-lines."""
    lines = "".join(
        json.dumps({"id": ident, "text": text}, ensure_ascii=False) + "\n"
        for ident, text in corpus.records
    ).encode("utf-8")
    atomic_write(Path(path), lambda fh: fh.write(lines))


def read_corpus(path: str | Path) -> CaptionCorpus:
    """Read a JSON-lines caption corpus; each line needs exactly id and text."""
    path = Path(path)
    records: list[tuple[str, str]] = []
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.decode("utf-8").rstrip("\n").rstrip("\r")
            if not line:
                raise FormatError(f"{path}:{lineno}: blank line in corpus")
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict) or set(obj) != {"id", "text"}:
                raise FormatError(
                    f"{path}:{lineno}: corpus records need exactly the fields id and text"
                )
            if not isinstance(obj["id"], str) or not isinstance(obj["text"], str):
                raise FormatError(f"{path}:{lineno}: id and text must be strings")
            records.append((obj["id"], obj["text"]))
    return CaptionCorpus(records=records)


def load_bundle(
    corpus_path: str | Path,
    text_vlm_path: str | Path,
    image_vlm_path: str | Path,
    text_sent_path: str | Path,
    *,
    mmap: bool = False,
) -> DatasetBundle:
    """Load and cross-validate a full dataset bundle.

    Matrices not flagged normalized are unit-normalized here, so downstream
    retrieval can treat cosine similarity as a dot product.
    """
    bundle = DatasetBundle(
        corpus=read_corpus(corpus_path),
        text_vlm=read_matrix(text_vlm_path, mmap=mmap),
        image_vlm=read_matrix(image_vlm_path, mmap=mmap),
        text_sent=read_matrix(text_sent_path, mmap=mmap),
    )
    return bundle.unit_normalized()
