"""Retrieval kernel tests against a full-sort reference implementation."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import syncref.simkernel as sk
from syncref.embstore import EmbeddingMatrix
from syncref.errors import ConfigError, DegenerateInputError, ValidationError
from syncref.simkernel import blocked_topk, cosine, score_pairs, topk


def naive_topk(a: np.ndarray, b: np.ndarray, k: int, dtype=np.float32):
    """Full similarity matrix, full sort by (value desc, index asc), truncate."""
    sims = a.astype(dtype) @ b.astype(dtype).T
    k_eff = min(k, b.shape[0])
    idx = np.empty((a.shape[0], k_eff), dtype=np.int64)
    val = np.empty((a.shape[0], k_eff), dtype=dtype)
    for r, row in enumerate(sims):
        order = np.lexsort((np.arange(row.size), -row))[:k_eff]
        idx[r] = order
        val[r] = row[order]
    return idx, val


def unit_rows(n: int, d: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((n, d)).astype(np.float32)
    return data / np.linalg.norm(data.astype(np.float64), axis=1, keepdims=True).astype(
        np.float32
    )


def int_rows(n: int, d: int, seed: int, lo: int = -4, hi: int = 5) -> np.ndarray:
    """Small-integer rows: every dot product is exact in float32."""
    rng = np.random.default_rng(seed)
    while True:
        data = rng.integers(lo, hi, size=(n, d)).astype(np.float32)
        if not np.any(np.all(data == 0.0, axis=1)):
            return data


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 12))
def test_topk_equals_full_sort(seed: int, k: int) -> None:
    q = unit_rows(9, 8, seed)
    pool = unit_rows(30, 8, seed + 1)
    expect_idx, expect_val = naive_topk(q, pool, k)
    got = topk(q, pool, k)
    for r, res in enumerate(got):
        np.testing.assert_array_equal(res.indices, expect_idx[r])
        np.testing.assert_array_equal(res.scores, expect_val[r])


def test_ties_break_by_ascending_index() -> None:
    u = np.array([3.0, 4.0], dtype=np.float32) / 5.0
    v = np.array([4.0, -3.0], dtype=np.float32) / 5.0
    w = np.array([0.0, 1.0], dtype=np.float32)
    pool = np.stack([v, u, w, u, u])  # exact duplicates at 1, 3, 4
    res = topk(u[None, :], pool, 4)[0]
    np.testing.assert_array_equal(res.indices, [1, 3, 4, 2])
    assert res.scores[0] == res.scores[1] == res.scores[2]


def test_all_equal_similarities_yield_identity_order() -> None:
    pool = np.tile(np.array([[1.0, 0.0]], dtype=np.float32), (6, 1))
    res = topk(np.array([[1.0, 0.0]], dtype=np.float32), pool, 3)[0]
    np.testing.assert_array_equal(res.indices, [0, 1, 2])


def test_k_clamps_to_pool_size() -> None:
    q = unit_rows(2, 4, 0)
    pool = unit_rows(5, 4, 1)
    res = topk(q, pool, 99)
    assert all(r.indices.shape == (5,) for r in res)
    expect_idx, _ = naive_topk(q, pool, 5)
    np.testing.assert_array_equal(res[0].indices, expect_idx[0])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), k_small=st.integers(1, 5), k_big=st.integers(6, 20))
def test_topk_prefix_nesting(seed: int, k_small: int, k_big: int) -> None:
    q = unit_rows(4, 6, seed)
    pool = unit_rows(25, 6, seed + 7)
    small = topk(q, pool, k_small)
    big = topk(q, pool, k_big)
    for s, b in zip(small, big):
        np.testing.assert_array_equal(s.indices, b.indices[: s.indices.size])


def test_scale_invariance_under_power_of_two() -> None:
    pool = int_rows(20, 6, 3)
    scaled = pool.copy()
    scaled[::3] *= 4.0  # exact in binary floating point
    def normalize(m):
        return (
            m.astype(np.float64)
            / np.linalg.norm(m.astype(np.float64), axis=1, keepdims=True)
        ).astype(np.float32)
    q = normalize(int_rows(5, 6, 4))
    a = topk(q, normalize(pool), 6)
    b = topk(q, normalize(scaled), 6)
    for ra, rb in zip(a, b):
        np.testing.assert_array_equal(ra.indices, rb.indices)
        np.testing.assert_array_equal(ra.scores, rb.scores)


def test_multi_tile_matches_single_tile(monkeypatch) -> None:
    q = int_rows(40, 5, 11)
    pool = int_rows(17, 5, 12)
    whole_idx, whole_val = naive_topk(q, pool, 4)
    monkeypatch.setattr(sk, "_TILE_CELLS", 64)  # forces many small tiles
    rows, _ = blocked_topk(q, pool, row_k=4)
    np.testing.assert_array_equal(rows.indices, whole_idx)
    np.testing.assert_array_equal(rows.scores, whole_val)


def test_trailing_single_row_tile_is_merged() -> None:
    bounds = sk._tile_bounds(17, 1)  # tile=16 would leave a 1-row tail
    assert bounds[-1][1] == 17
    assert all(hi - lo > 1 for lo, hi in bounds)
    joined = [i for lo, hi in bounds for i in range(lo, hi)]
    assert joined == list(range(17))


def test_tile_bounds_cover_exactly() -> None:
    for n, m in [(0, 10), (1, 10), (100, 3), (4097, 50)]:
        bounds = sk._tile_bounds(n, m)
        joined = [i for lo, hi in bounds for i in range(lo, hi)]
        assert joined == list(range(n))


def test_column_harvest_equals_transposed_rows() -> None:
    a = int_rows(23, 6, 21)
    b = int_rows(9, 6, 22)
    _, cols = blocked_topk(a, b, col_k=3)
    expect_idx, expect_val = naive_topk(b, a, 3)
    np.testing.assert_array_equal(cols.indices, expect_idx)
    np.testing.assert_array_equal(cols.scores, expect_val)


def test_column_harvest_across_tiles(monkeypatch) -> None:
    a = int_rows(60, 4, 31)
    b = int_rows(11, 4, 32)
    expect_idx, expect_val = naive_topk(b, a, 5)
    monkeypatch.setattr(sk, "_TILE_CELLS", 100)
    rows, cols = blocked_topk(a, b, row_k=2, col_k=5)
    np.testing.assert_array_equal(cols.indices, expect_idx)
    np.testing.assert_array_equal(cols.scores, expect_val)
    whole_idx, whole_val = naive_topk(a, b, 2)
    np.testing.assert_array_equal(rows.indices, whole_idx)


def test_column_ties_break_by_ascending_query_index(monkeypatch) -> None:
    u = np.array([[1.0, 0.0]], dtype=np.float32)
    a = np.concatenate([u, u, u, u, u, u])  # six identical queries
    b = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32)
    monkeypatch.setattr(sk, "_TILE_CELLS", 4)  # split the ties across tiles
    _, cols = blocked_topk(a, b, col_k=3)
    np.testing.assert_array_equal(cols.indices[0], [0, 1, 2])
    np.testing.assert_array_equal(cols.indices[1], [0, 1, 2])


@pytest.mark.parametrize("workers", [2, 8])
def test_workers_do_not_change_results(workers: int) -> None:
    q = unit_rows(300, 16, 5)
    pool = unit_rows(120, 16, 6)
    base_rows, base_cols = blocked_topk(q, pool, row_k=7, col_k=3, workers=1)
    rows, cols = blocked_topk(q, pool, row_k=7, col_k=3, workers=workers)
    np.testing.assert_array_equal(rows.indices, base_rows.indices)
    np.testing.assert_array_equal(rows.scores, base_rows.scores)
    np.testing.assert_array_equal(cols.indices, base_cols.indices)
    np.testing.assert_array_equal(cols.scores, base_cols.scores)


def test_float64_accumulation_option() -> None:
    q = unit_rows(4, 8, 40)
    pool = unit_rows(15, 8, 41)
    expect_idx, expect_val = naive_topk(q, pool, 5, dtype=np.float64)
    rows, _ = blocked_topk(q, pool, row_k=5, accum="float64")
    assert rows.scores.dtype == np.float64
    np.testing.assert_array_equal(rows.indices, expect_idx)
    np.testing.assert_array_equal(rows.scores, expect_val)


def test_empty_queries_allowed_empty_pool_rejected() -> None:
    pool = unit_rows(3, 4, 1)
    assert topk(np.empty((0, 4), dtype=np.float32), pool, 2) == []
    with pytest.raises(ValidationError, match="empty pool"):
        topk(unit_rows(2, 4, 0), np.empty((0, 4), dtype=np.float32), 2)


def test_dimension_mismatch_rejected() -> None:
    with pytest.raises(ValidationError, match="dimension mismatch"):
        topk(unit_rows(2, 4, 0), unit_rows(3, 5, 1), 2)


def test_bad_k_and_accum_rejected() -> None:
    q, pool = unit_rows(2, 4, 0), unit_rows(3, 4, 1)
    with pytest.raises(ConfigError, match="row_k must be >= 1"):
        topk(q, pool, 0)
    with pytest.raises(ConfigError, match="unknown accumulation mode"):
        topk(q, pool, 1, accum="float16")
    with pytest.raises(ConfigError, match="row_k and/or col_k"):
        blocked_topk(q, pool)


def test_cosine_hand_values() -> None:
    assert cosine([3.0, 4.0], [4.0, 3.0]) == pytest.approx(24.0 / 25.0)
    assert cosine([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert cosine([1.0, 2.0], [-1.0, -2.0]) == pytest.approx(-1.0)
    assert cosine([0.6, 0.8], [0.6, 0.8], assume_normalized=True) == pytest.approx(1.0)


def test_cosine_clamps_to_unit_interval() -> None:
    v = [1.0000001, 0.0]
    assert cosine(v, v, assume_normalized=True) == 1.0


def test_cosine_rejects_degenerate_inputs() -> None:
    with pytest.raises(DegenerateInputError, match="zero-norm"):
        cosine([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(ValidationError, match="dimension mismatch"):
        cosine([1.0], [1.0, 0.0])
    with pytest.raises(ValidationError, match="finite"):
        cosine([np.nan, 1.0], [1.0, 0.0])


def matrix_of(data: np.ndarray, normalized: bool = False) -> EmbeddingMatrix:
    return EmbeddingMatrix(
        data=data, ids=[f"r{i}" for i in range(data.shape[0])], normalized=normalized
    )


def test_score_pairs_matches_scalar_cosine() -> None:
    a = matrix_of(int_rows(6, 5, 50))
    b = matrix_of(int_rows(4, 5, 51))
    ra, rb = [0, 2, 5, 1], [3, 0, 1, 1]
    got = score_pairs(ra, a, rb, b)
    assert got.dtype == np.float64
    for i, (x, y) in enumerate(zip(ra, rb)):
        assert got[i] == pytest.approx(cosine(a.data[x], b.data[y]), abs=1e-6)


def test_score_pairs_normalized_fast_path() -> None:
    data = np.eye(4, dtype=np.float32)
    m = matrix_of(data, normalized=True)
    got = score_pairs([0, 1, 2], m, [0, 1, 3], m)
    np.testing.assert_array_equal(got, [1.0, 1.0, 0.0])


def test_score_pairs_stays_in_unit_interval() -> None:
    # Rows normalized within tolerance can give raw dots slightly above 1.
    data = np.array([[1.00004, 0.0]], dtype=np.float32)
    m = matrix_of(data, normalized=True)
    assert score_pairs([0], m, [0], m)[0] == 1.0


def test_score_pairs_rejects_bad_indices() -> None:
    m = matrix_of(int_rows(3, 4, 60))
    with pytest.raises(ValidationError, match="out of range"):
        score_pairs([0, 3], m, [0, 1], m)
    with pytest.raises(ValidationError, match="differ in length"):
        score_pairs([0, 1], m, [0], m)
    assert score_pairs([], m, [], m).size == 0


def test_score_pairs_rejects_zero_norm_rows() -> None:
    data = np.zeros((2, 3), dtype=np.float32)
    data[0, 0] = 1.0
    m = EmbeddingMatrix(data=data, ids=["a", "b"])
    with pytest.raises(DegenerateInputError, match="zero-norm"):
        score_pairs([1], m, [0], m)
