"""Kernel tests: dense reference, block-sparse streaming, accounting.

The ground truth throughout is a token-level float64 oracle that
materializes the full score matrix, applies the expanded block mask
with -inf (excluded keys never contribute, they are not logit-zero),
and does one softmax per row.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chunkattn.attention import (
    AttnStats,
    BlockMask,
    ChunkLayout,
    ZeroActiveRowError,
    block_sparse_attention,
    ceil_div,
    dense_attention,
)


def token_oracle(q, k, v, bits, b_q, b_kv):
    """Masked attention with full materialization, all float64."""
    q64, k64, v64 = q.astype(np.float64), k.astype(np.float64), v.astype(np.float64)
    scores = q64 @ k64.T / np.sqrt(q.shape[1])
    tok_mask = np.zeros(scores.shape, dtype=bool)
    for bi in range(bits.shape[0]):
        for bj in range(bits.shape[1]):
            if bits[bi, bj]:
                tok_mask[bi * b_q : (bi + 1) * b_q, bj * b_kv : (bj + 1) * b_kv] = True
    scores = np.where(tok_mask, scores, -np.inf)
    scores -= scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=1, keepdims=True)
    return (w @ v64).astype(np.float32)


def random_case(rng, rows, keys, d, b_q, b_kv, density=0.5):
    q = rng.standard_normal((rows, d)).astype(np.float32)
    k = rng.standard_normal((keys, d)).astype(np.float32)
    v = rng.standard_normal((keys, d)).astype(np.float32)
    n_q, n_k = ceil_div(rows, b_q), ceil_div(keys, b_kv)
    bits = rng.random((n_q, n_k)) < density
    bits[~bits.any(axis=1), 0] = True  # keep every row attendable
    return q, k, v, bits


# ---------------------------------------------------------------------------
# ChunkLayout


def test_layout_block_counts():
    lay = ChunkLayout(f=3, n=128, b_q=64, b_kv=64, d=32, N=7)
    assert lay.chunk_tokens == 384
    assert lay.q_blocks == 6
    assert lay.frame_kv_blocks == 2
    assert lay.context_tokens(2) == 768
    assert lay.k_blocks(2) == 12
    # candidate count for budgets is key blocks, frame aligned
    assert lay.total_blocks(2) == 12


def test_layout_ragged_blocks_round_up():
    lay = ChunkLayout(f=1, n=100, b_q=64, b_kv=48, d=8, N=2)
    assert lay.q_blocks == 2  # 100/64
    assert lay.frame_kv_blocks == 3  # 100/48


def test_layout_rejects_nonpositive():
    with pytest.raises(ValueError):
        ChunkLayout(f=0, n=128, b_q=64, b_kv=64, d=32, N=7)


def test_layout_chunk_bounds():
    lay = ChunkLayout(f=1, n=64, b_q=64, b_kv=64, d=8, N=3)
    with pytest.raises(ValueError):
        lay.check_chunk(0)
    with pytest.raises(ValueError):
        lay.check_chunk(4)


# ---------------------------------------------------------------------------
# BlockMask


def test_mask_full_and_popcount():
    m = BlockMask.full(3, 4)
    assert m.popcount() == 12
    np.testing.assert_array_equal(m.row_popcounts(), [4, 4, 4])


def test_mask_coerces_integer_grid():
    m = BlockMask(np.array([[1, 0], [0, 1]], dtype=np.uint8))
    assert m.bits.dtype == bool
    assert m.popcount() == 2


def test_mask_pgm_round_trip(tmp_path):
    bits = np.array([[True, False], [False, True]])
    path = tmp_path / "m.pgm"
    BlockMask(bits).to_pgm(path)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n2 2\n255\n")
    body = raw[len(b"P5\n2 2\n255\n") :]
    assert body == bytes([255, 0, 0, 255])


# ---------------------------------------------------------------------------
# dense_attention


def test_dense_matches_oracle():
    rng = np.random.default_rng(1)
    q, k, v, _ = random_case(rng, 200, 300, 16, 64, 64)
    full = np.ones((ceil_div(200, 64), ceil_div(300, 64)), dtype=bool)
    np.testing.assert_allclose(
        dense_attention(q, k, v), token_oracle(q, k, v, full, 64, 64), atol=1e-5
    )


def test_dense_single_key_is_value_copy():
    rng = np.random.default_rng(2)
    q = rng.standard_normal((5, 4)).astype(np.float32)
    k = rng.standard_normal((1, 4)).astype(np.float32)
    v = rng.standard_normal((1, 4)).astype(np.float32)
    out = dense_attention(q, k, v)
    np.testing.assert_allclose(out, np.repeat(v, 5, axis=0), atol=1e-6)


def test_dense_rejects_mismatched_kv():
    q = np.zeros((2, 4), dtype=np.float32)
    k = np.zeros((3, 4), dtype=np.float32)
    v = np.zeros((2, 4), dtype=np.float32)
    with pytest.raises(ValueError):
        dense_attention(q, k, v)


# ---------------------------------------------------------------------------
# block_sparse_attention


def test_sparse_matches_token_oracle():
    rng = np.random.default_rng(3)
    q, k, v, bits = random_case(rng, 300, 290, 32, 64, 48, density=0.4)
    lay = ChunkLayout(f=1, n=290, b_q=64, b_kv=48, d=32, N=1)
    out, stats = block_sparse_attention(q, k, v, BlockMask(bits), lay)
    np.testing.assert_allclose(out, token_oracle(q, k, v, bits, 64, 48), atol=1e-5)
    assert stats.active_tiles == int(bits.sum())


def test_full_mask_equals_dense():
    rng = np.random.default_rng(4)
    q, k, v, _ = random_case(rng, 150, 180, 16, 64, 64)
    lay = ChunkLayout(f=1, n=180, b_q=64, b_kv=64, d=16, N=1)
    full = BlockMask.full(ceil_div(150, 64), ceil_div(180, 64))
    out, _ = block_sparse_attention(q, k, v, full, lay)
    np.testing.assert_allclose(out, dense_attention(q, k, v), atol=1e-6)


def test_excluded_tiles_are_truly_excluded():
    # keys in masked-off tiles must have zero influence, so perturbing
    # them cannot change the output at all
    rng = np.random.default_rng(5)
    q, k, v, bits = random_case(rng, 128, 128, 8, 64, 64, density=0.5)
    bits[:, 1] = False
    bits[:, 0] = True
    lay = ChunkLayout(f=1, n=128, b_q=64, b_kv=64, d=8, N=1)
    out_a, _ = block_sparse_attention(q, k, v, BlockMask(bits), lay)
    k2, v2 = k.copy(), v.copy()
    k2[64:] += 100.0
    v2[64:] -= 50.0
    out_b, _ = block_sparse_attention(q, k2, v2, BlockMask(bits), lay)
    np.testing.assert_array_equal(out_a, out_b)


def test_zero_active_row_raises():
    rng = np.random.default_rng(6)
    q, k, v, bits = random_case(rng, 128, 128, 8, 64, 64)
    bits[1, :] = False
    lay = ChunkLayout(f=1, n=128, b_q=64, b_kv=64, d=8, N=1)
    with pytest.raises(ZeroActiveRowError):
        block_sparse_attention(q, k, v, BlockMask(bits), lay)


def test_mask_shape_checked():
    rng = np.random.default_rng(7)
    q, k, v, _ = random_case(rng, 128, 128, 8, 64, 64)
    lay = ChunkLayout(f=1, n=128, b_q=64, b_kv=64, d=8, N=1)
    with pytest.raises(ValueError):
        block_sparse_attention(q, k, v, BlockMask.full(3, 2), lay)


def test_flop_accounting_is_nominal():
    # ragged edges still count full b_q*b_kv*d*2 per active tile
    rng = np.random.default_rng(8)
    q, k, v, bits = random_case(rng, 100, 130, 16, 64, 64, density=1.1)
    lay = ChunkLayout(f=1, n=130, b_q=64, b_kv=64, d=16, N=1)
    _, stats = block_sparse_attention(q, k, v, BlockMask(bits), lay)
    assert stats.total_tiles == 2 * 3
    assert stats.active_tiles == 6
    assert stats.flop_estimate == 6 * 64 * 64 * 16 * 2
    assert stats.wall_time > 0.0


def test_threads_do_not_change_bits():
    rng = np.random.default_rng(9)
    q, k, v, bits = random_case(rng, 260, 310, 32, 64, 64, density=0.6)
    lay = ChunkLayout(f=1, n=310, b_q=64, b_kv=64, d=32, N=1)
    out1, _ = block_sparse_attention(q, k, v, BlockMask(bits), lay, threads=1)
    out4, _ = block_sparse_attention(q, k, v, BlockMask(bits), lay, threads=4)
    np.testing.assert_array_equal(out1, out4)
    d1 = dense_attention(q, k, v, threads=1)
    d4 = dense_attention(q, k, v, threads=4)
    np.testing.assert_array_equal(d1, d4)


@given(
    rows=st.integers(1, 200),
    keys=st.integers(1, 200),
    d=st.sampled_from([4, 16, 32]),
    b_q=st.sampled_from([16, 64]),
    b_kv=st.sampled_from([16, 48, 64]),
    seed=st.integers(0, 2**31),
)
@settings(max_examples=40, deadline=None)
def test_sparse_oracle_property(rows, keys, d, b_q, b_kv, seed):
    rng = np.random.default_rng(seed)
    q, k, v, bits = random_case(rng, rows, keys, d, b_q, b_kv, density=0.5)
    lay = ChunkLayout(f=1, n=keys, b_q=b_q, b_kv=b_kv, d=d, N=1)
    out, _ = block_sparse_attention(q, k, v, BlockMask(bits), lay)
    np.testing.assert_allclose(out, token_oracle(q, k, v, bits, b_q, b_kv), atol=1e-5)


def test_stats_defaults():
    s = AttnStats(active_tiles=1, total_tiles=2, flop_estimate=3, wall_time=0.5)
    assert s.select_time == 0.0
    assert s.budget_clamped is False
