"""Exact, deterministic, parallel cosine retrieval kernels.

All retrieval here is exact: every query is scored against the full pool
and results equal a full sort by (similarity descending, row index
ascending) truncated to K. There is no approximate indexing.

Callers hand in unit-normalized rows (the loaders guarantee this), which
turns cosine similarity into a plain dot product. Work proceeds in fixed
query tiles whose boundaries depend only on the problem shape, never on
the worker count, so results are bit-identical for any parallelism.

``blocked_topk`` is the shared engine: one pass over the similarity tiles
can harvest both the per-query top-K (rows of A @ B^T) and the per-pool-row
top-K (columns), which is what lets the refinement pipeline score with a
single similarity sweep instead of two.
"""

from __future__ import annotations

from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import islice
from typing import Callable, Iterable, Iterator

import numpy as np

from .embstore import EmbeddingMatrix
from .errors import ConfigError, DegenerateInputError, ValidationError

# Fixed tile budget: ~32M similarity cells per tile keeps peak memory low
# while keeping sgemm calls large enough to run at full speed.
_TILE_CELLS = 1 << 25
_TILE_MAX_ROWS = 4096

_ACCUM_DTYPES = {"float32": np.float32, "float64": np.float64}


def accum_dtype(accum: str) -> np.dtype:
    try:
        return np.dtype(_ACCUM_DTYPES[accum])
    except KeyError:
        raise ConfigError(f"unknown accumulation mode {accum!r} (float32 or float64)") from None


def _tile_bounds(n_rows: int, n_pool: int) -> list[tuple[int, int]]:
    """Fixed query tiling; a trailing 1-row tile is merged into its neighbor
    so BLAS never sees a degenerate single-row multiply with its own kernel."""
    if n_rows == 0:
        return []
    tile = max(16, min(_TILE_MAX_ROWS, _TILE_CELLS // max(1, n_pool)))
    bounds = [(lo, min(lo + tile, n_rows)) for lo in range(0, n_rows, tile)]
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] == 1:
        last_lo, last_hi = bounds.pop()
        prev_lo, _ = bounds.pop()
        bounds.append((prev_lo, last_hi))
    return bounds


def _ordered_tile_results(
    tiles: list[tuple[int, int]],
    fn: Callable[[tuple[int, int]], object],
    workers: int,
) -> Iterator[object]:
    """Run fn over tiles, yielding results in tile order.

    With workers > 1 a sliding window keeps at most a few tiles in flight
    so peak memory stays bounded.
    """
    if workers <= 1 or len(tiles) <= 1:
        for tile in tiles:
            yield fn(tile)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        queue: deque = deque()
        it = iter(tiles)
        for tile in islice(it, workers + 2):
            queue.append(pool.submit(fn, tile))
        while queue:
            result = queue.popleft().result()
            nxt = next(it, None)
            if nxt is not None:
                queue.append(pool.submit(fn, nxt))
            yield result


def _exact_row_topk(
    sims: np.ndarray, k: int
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row exact top-k of a dense similarity block.

    Equivalent to a full per-row sort by (value desc, column asc) truncated
    to k: select the k-th value, gather strictly-greater columns plus the
    lowest-index ties, then order the k survivors.
    """
    rows, width = sims.shape
    k_eff = min(k, width)
    out_idx = np.empty((rows, k_eff), dtype=np.int64)
    out_val = np.empty((rows, k_eff), dtype=sims.dtype)
    if k_eff == 0 or rows == 0:
        return out_idx, out_val
    if k_eff == width:
        order = np.lexsort((np.arange(width)[None, :].repeat(rows, 0), -sims), axis=1)
        out_idx[:] = order
        out_val[:] = np.take_along_axis(sims, order, axis=1)
        return out_idx, out_val

    kth = np.partition(sims, width - k_eff, axis=1)[:, width - k_eff]
    gt_mask = sims > kth[:, None]
    g_rows, g_cols = np.nonzero(gt_mask)
    g_counts = np.bincount(g_rows, minlength=rows)
    g_off = np.zeros(rows + 1, dtype=np.int64)
    np.cumsum(g_counts, out=g_off[1:])
    eq_mask = sims == kth[:, None]
    e_rows, e_cols = np.nonzero(eq_mask)
    e_counts = np.bincount(e_rows, minlength=rows)
    e_off = np.zeros(rows + 1, dtype=np.int64)
    np.cumsum(e_counts, out=e_off[1:])

    for r in range(rows):
        need = k_eff - g_counts[r]
        take = np.concatenate(
            [g_cols[g_off[r] : g_off[r + 1]], e_cols[e_off[r] : e_off[r] + need]]
        )
        vals = sims[r, take]
        order = np.lexsort((take, -vals))
        out_idx[r] = take[order]
        out_val[r] = vals[order]
    return out_idx, out_val


def _block_col_topk(
    sims: np.ndarray, k: int, row_offset: int
) -> tuple[np.ndarray, np.ndarray]:
    """Per-column top-k of one tile, exact under (value desc, index asc).

    Works on the transposed copy with repeated argmax passes; argmax takes
    the first maximum, which is precisely the lowest-index tie.
    """
    rows, width = sims.shape
    k_eff = min(k, rows)
    scratch = np.ascontiguousarray(sims.T)  # (width, rows)
    sel = np.arange(width)
    cand_val = np.empty((width, k_eff), dtype=sims.dtype)
    cand_idx = np.empty((width, k_eff), dtype=np.int64)
    for j in range(k_eff):
        am = np.argmax(scratch, axis=1)
        cand_val[:, j] = scratch[sel, am]
        cand_idx[:, j] = am + row_offset
        scratch[sel, am] = -np.inf
    return cand_val, cand_idx


def _merge_col_topk(
    run_val: np.ndarray,
    run_idx: np.ndarray,
    new_val: np.ndarray,
    new_idx: np.ndarray,
) -> None:
    """Merge tile candidates into the running per-column top-k, in place."""
    k = run_val.shape[1]
    vals = np.concatenate([run_val, new_val], axis=1)
    idxs = np.concatenate([run_idx, new_idx], axis=1)
    order = np.lexsort((idxs, -vals), axis=1)[:, :k]
    run_val[:] = np.take_along_axis(vals, order, axis=1)
    run_idx[:] = np.take_along_axis(idxs, order, axis=1)


@dataclass(frozen=True)
class TopKTable:
    """Rectangular top-k results: row i holds the i-th query's neighbors."""

    indices: np.ndarray  # (n_queries, k) int64, similarity-descending
    scores: np.ndarray  # matching similarities

    @property
    def k(self) -> int:
        return self.indices.shape[1]


@dataclass(frozen=True)
class TopKResult:
    """Top-K neighbors of a single query."""

    indices: np.ndarray
    scores: np.ndarray


def blocked_topk(
    a: np.ndarray,
    b: np.ndarray,
    *,
    row_k: int | None = None,
    col_k: int | None = None,
    accum: str = "float32",
    workers: int = 1,
) -> tuple[TopKTable | None, TopKTable | None]:
    """Tile A @ B^T once, harvesting row-wise and/or column-wise top-k.

    row table: for each row of ``a``, its top ``row_k`` rows of ``b``.
    col table: for each row of ``b``, its top ``col_k`` rows of ``a``.
    Both are exact with ties broken by ascending index; results do not
    depend on ``workers``.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValidationError(
            f"dimension mismatch: queries {a.shape} vs pool {b.shape}"
        )
    if row_k is None and col_k is None:
        raise ConfigError("blocked_topk needs row_k and/or col_k")
    for name, k in (("row_k", row_k), ("col_k", col_k)):
        if k is not None and k < 1:
            raise ConfigError(f"{name} must be >= 1, got {k}")
    if row_k is not None and b.shape[0] == 0:
        raise ValidationError("empty pool")
    if col_k is not None and a.shape[0] == 0:
        raise ValidationError("empty pool")

    dtype = accum_dtype(accum)
    na, nb = a.shape[0], b.shape[0]
    a_mat = np.ascontiguousarray(a, dtype=dtype)
    b_t = np.ascontiguousarray(b, dtype=dtype).T

    row_keff = min(row_k, nb) if row_k is not None else 0
    row_idx = np.empty((na, row_keff), dtype=np.int64) if row_k is not None else None
    row_val = np.empty((na, row_keff), dtype=dtype) if row_k is not None else None

    col_keff = min(col_k, na) if col_k is not None else 0
    if col_k is not None:
        run_val = np.full((nb, col_keff), -np.inf, dtype=dtype)
        run_idx = np.full((nb, col_keff), np.iinfo(np.int64).max, dtype=np.int64)

    def work(tile: tuple[int, int]):
        lo, hi = tile
        sims = np.matmul(a_mat[lo:hi], b_t)
        if row_k is not None:
            t_idx, t_val = _exact_row_topk(sims, row_keff)
            row_idx[lo:hi] = t_idx
            row_val[lo:hi] = t_val
        if col_k is not None:
            return _block_col_topk(sims, col_keff, lo)
        return None

    tiles = _tile_bounds(na, nb)
    for result in _ordered_tile_results(tiles, work, workers):
        if result is not None:
            cand_val, cand_idx = result
            _merge_col_topk(run_val, run_idx, cand_val, cand_idx)

    rows = TopKTable(indices=row_idx, scores=row_val) if row_k is not None else None
    cols = (
        TopKTable(indices=run_idx, scores=run_val) if col_k is not None else None
    )
    return rows, cols


def topk(
    queries: np.ndarray,
    pool: np.ndarray,
    k: int,
    *,
    accum: str = "float32",
    workers: int = 1,
) -> list[TopKResult]:
    """Exact top-k pool rows per query, ranked by (similarity desc, index asc)."""
    rows, _ = blocked_topk(queries, pool, row_k=k, accum=accum, workers=workers)
    assert rows is not None
    return [
        TopKResult(indices=rows.indices[i], scores=rows.scores[i])
        for i in range(rows.indices.shape[0])
    ]


def cosine(a, b, *, assume_normalized: bool = False) -> float:
    """Cosine similarity of two vectors, accumulated in float64.

    With ``assume_normalized`` the norms are taken as 1 and this is a plain
    dot product. The result is clamped to [-1, 1] to absorb rounding from
    rows normalized within tolerance.
    """
    va = np.asarray(a, dtype=np.float64).reshape(-1)
    vb = np.asarray(b, dtype=np.float64).reshape(-1)
    if va.shape != vb.shape:
        raise ValidationError(f"dimension mismatch: {va.shape[0]} vs {vb.shape[0]}")
    if not (np.all(np.isfinite(va)) and np.all(np.isfinite(vb))):
        raise ValidationError("cosine inputs must be finite")
    dot = float(va @ vb)
    if not assume_normalized:
        na = float(np.linalg.norm(va))
        nb = float(np.linalg.norm(vb))
        if na == 0.0 or nb == 0.0:
            raise DegenerateInputError("cosine of a zero-norm vector is undefined")
        dot /= na * nb
    return min(1.0, max(-1.0, dot))


def score_pairs(
    rows_a: Iterable[int],
    mat_a: EmbeddingMatrix,
    rows_b: Iterable[int],
    mat_b: EmbeddingMatrix,
    *,
    accum: str = "float32",
) -> np.ndarray:
    """Element-wise cosine of selected row pairs (unit scale factor).

    Both matrices normalized means plain gathered dot products; otherwise
    rows are normalized on the fly. Returns float64 scores in [-1, 1].
    """
    dtype = accum_dtype(accum)
    ia = np.asarray(list(rows_a), dtype=np.int64)
    ib = np.asarray(list(rows_b), dtype=np.int64)
    if ia.shape != ib.shape:
        raise ValidationError(f"index lists differ in length: {ia.size} vs {ib.size}")
    if ia.size == 0:
        return np.empty(0, dtype=np.float64)
    for idx, mat, side in ((ia, mat_a, "a"), (ib, mat_b, "b")):
        if idx.min() < 0 or idx.max() >= mat.n:
            bad = idx[(idx < 0) | (idx >= mat.n)][0]
            raise ValidationError(f"row index {int(bad)} out of range for side {side} (n={mat.n})")
    ga = mat_a.data[ia].astype(dtype, copy=False)
    gb = mat_b.data[ib].astype(dtype, copy=False)
    dots = np.einsum("ij,ij->i", ga, gb).astype(np.float64)
    if not (mat_a.normalized and mat_b.normalized):
        norm_a = np.sqrt(np.einsum("ij,ij->i", ga, ga, dtype=np.float64))
        norm_b = np.sqrt(np.einsum("ij,ij->i", gb, gb, dtype=np.float64))
        zero = np.flatnonzero((norm_a == 0) | (norm_b == 0))
        if zero.size:
            raise DegenerateInputError(
                f"zero-norm row in pair {int(zero[0])}"
            )
        dots /= norm_a * norm_b
    return np.clip(dots, -1.0, 1.0)
