"""Planner tests: schedule shape, FLOPs balance, budgets, drift bound.

The independent oracle here recomputes beta by direct substitution
(single solve, then clamp) using nothing from the module under test
except the published formulas.
"""

import math

import numpy as np
import pytest

from chunkattn.attention import ChunkLayout
from chunkattn.planner import (
    ChunkLengths,
    DegenerateScheduleError,
    allocate,
    alpha_schedule,
    budget_for_chunk,
    chunk_block_budget,
    plan_from_json,
    plan_to_json,
    round_half_up,
    s_max_for_chunk,
    solve_beta,
    tv_bound,
)

STOCK_LAYOUT = ChunkLayout(f=3, n=512, b_q=64, b_kv=64, d=64, N=7)

# stock-default schedule: every later chunk rails against its causal
# ceiling 1 - 1/i, so the plan cannot reach the 0.9 target
GOLDEN_S = (0.0, 0.5, 2.0 / 3.0, 0.75, 0.8, 5.0 / 6.0, 6.0 / 7.0)
GOLDEN_BETA = 0.17311058252534645
GOLDEN_ACHIEVED = 0.2222222222222222


def oracle_plan(s_target, s_base, N, T, weights, s_hi, first_chunk_dense=True):
    """Substitution oracle: solve beta once over planned chunks, clamp."""
    idx = np.arange(1, N + 1)
    alpha = 1.0 / np.sqrt(idx * T)
    alpha = alpha / alpha.max()
    planned = np.ones(N, dtype=bool)
    if first_chunk_dense:
        planned[0] = False
    w, hi = np.asarray(weights, dtype=float), np.asarray(s_hi, dtype=float)
    target = (1.0 - s_target) * w[planned].sum()
    beta = (target - (1.0 - s_base) * w[planned].sum()) / np.dot(alpha[planned], w[planned])
    s = np.clip(s_base - alpha * beta, 0.0, hi)
    s[~planned] = 0.0
    return beta, s


# ---------------------------------------------------------------------------
# small pieces


def test_round_half_up():
    assert round_half_up(0.5) == 1
    assert round_half_up(1.5) == 2
    assert round_half_up(2.4) == 2
    assert round_half_up(-0.5) == 0
    assert round_half_up(50.4) == 50


def test_alpha_schedule_normalized():
    a = alpha_schedule(2, 4)
    np.testing.assert_allclose(a, [1.0, 1.0 / math.sqrt(2)], rtol=1e-15)
    assert a.max() == 1.0


def test_alpha_schedule_T_cancels():
    # T scales every raw entry equally, so the normalized profile is 1/sqrt(i)
    np.testing.assert_allclose(alpha_schedule(5, 1), alpha_schedule(5, 8), rtol=1e-15)
    np.testing.assert_allclose(alpha_schedule(5, 3), 1.0 / np.sqrt(np.arange(1, 6)), rtol=1e-15)


def test_chunk_lengths_from_layout():
    lengths = ChunkLengths.from_layout(STOCK_LAYOUT)
    assert lengths.l_q == STOCK_LAYOUT.chunk_tokens
    assert lengths.l_k == tuple(STOCK_LAYOUT.context_tokens(i) for i in range(1, 8))
    w = lengths.weights()
    np.testing.assert_allclose(w, lengths.l_q * np.asarray(lengths.l_k) * lengths.d)


def test_s_max_is_causal_ceiling():
    assert s_max_for_chunk(1, STOCK_LAYOUT) == 0.0
    assert s_max_for_chunk(2, STOCK_LAYOUT) == 0.5
    np.testing.assert_allclose(s_max_for_chunk(3, STOCK_LAYOUT), 2.0 / 3.0, rtol=1e-15)


def test_chunk_block_budget_rounding():
    # 7 chunks * 3 frames * 24 blocks = 504 candidates; keep 10.0% -> 50.4 -> 50
    lay = ChunkLayout(f=3, n=1536, b_q=64, b_kv=64, d=64, N=7)
    assert lay.total_blocks(7) == 504
    assert chunk_block_budget(0.9, 7, lay) == 50
    assert chunk_block_budget(0.0, 1, lay) == lay.total_blocks(1)
    with pytest.raises(ValueError):
        chunk_block_budget(-0.1, 1, lay)
    with pytest.raises(ValueError):
        chunk_block_budget(1.5, 1, lay)


def test_solve_beta_substitution():
    # plugging beta back in must land exactly on the FLOPs target
    idx = np.arange(1, 9)
    alpha = 1.0 / np.sqrt(idx)
    lengths = ChunkLengths(l_q=100, l_k=tuple(100 * idx), d=16)
    w = lengths.weights()
    beta = solve_beta(0.3, 0.5, alpha, lengths)
    s = 0.5 - alpha * beta
    lhs = ((1.0 - s) * w).sum()
    rhs = (1.0 - 0.3) * w.sum()
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12)


def test_solve_beta_degenerate():
    lengths = ChunkLengths(l_q=10, l_k=(10, 20), d=4)
    with pytest.raises(DegenerateScheduleError):
        solve_beta(0.2, 0.5, np.zeros(2), lengths)


# ---------------------------------------------------------------------------
# allocate


def test_allocate_matches_oracle_at_stock_defaults():
    plan = allocate(0.9, 0.98, 7, 4, STOCK_LAYOUT)
    w = ChunkLengths.from_layout(STOCK_LAYOUT).weights()
    hi = [s_max_for_chunk(i, STOCK_LAYOUT) for i in range(1, 8)]
    beta, s = oracle_plan(0.9, 0.98, 7, 4, w, hi)
    np.testing.assert_allclose(plan.beta, beta, rtol=1e-12)
    np.testing.assert_allclose(plan.s, s, rtol=1e-12)


def test_stock_defaults_golden_values():
    plan = allocate(0.9, 0.98, 7, 4, STOCK_LAYOUT)
    np.testing.assert_allclose(plan.s, GOLDEN_S, rtol=1e-12)
    np.testing.assert_allclose(plan.beta, GOLDEN_BETA, rtol=1e-12)
    np.testing.assert_allclose(plan.achieved_flops_ratio, GOLDEN_ACHIEVED, rtol=1e-12)
    assert plan.clamped == (False, True, True, True, True, True, True)
    assert plan.first_chunk_dense
    # density 1/i over i*24 candidate blocks is always 24
    assert plan.budgets == (24,) * 7


def test_stock_defaults_growth():
    plan = allocate(0.9, 0.98, 7, 4, STOCK_LAYOUT)
    later = plan.s[1:]
    assert all(b > a for a, b in zip(later, later[1:]))


def test_flops_identity_when_unclamped():
    # mild schedule far from every ceiling: balance must hold exactly
    lay = ChunkLayout(f=2, n=64, b_q=32, b_kv=32, d=16, N=8)
    plan = allocate(0.2, 0.3, 8, 4, lay)
    assert not any(plan.clamped)
    w = ChunkLengths.from_layout(lay).weights()
    lhs = sum((1.0 - si) * wi for si, wi in zip(plan.s[1:], w[1:]))
    rhs = (1.0 - 0.2) * w[1:].sum()
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12)
    np.testing.assert_allclose(plan.achieved_flops_ratio, 1.0 - 0.2, rtol=1e-12)


def test_allocate_validation():
    with pytest.raises(ValueError):
        allocate(0.95, 0.9, 7, 4, STOCK_LAYOUT)  # target above base
    with pytest.raises(ValueError):
        allocate(1.0, 1.0, 7, 4, STOCK_LAYOUT)  # s_target must stay below 1
    with pytest.raises(ValueError):
        allocate(0.5, 0.9, 6, 4, STOCK_LAYOUT)  # N disagrees with layout


def test_allocate_single_chunk():
    lay = ChunkLayout(f=1, n=64, b_q=64, b_kv=64, d=8, N=1)
    plan = allocate(0.0, 0.5, 1, 4, lay)
    assert plan.s == (0.0,)
    assert plan.budgets == (1,)


def test_first_chunk_dense_off_clamps_to_zero():
    # chunk 1 has no past, its ceiling is 0, so it rails there
    plan = allocate(0.5, 0.9, 7, 4, STOCK_LAYOUT, first_chunk_dense=False)
    assert plan.s[0] == 0.0
    assert plan.clamped[0]


def test_redistribute_restores_identity():
    # pick a schedule where only the earliest planned chunk rails; the
    # re-solve must push the shortfall onto the free chunks exactly
    lay = ChunkLayout(f=2, n=128, b_q=64, b_kv=64, d=16, N=8)
    base = allocate(0.75, 0.95, 8, 4, lay, redistribute=False)
    assert any(base.clamped) and not all(base.clamped[1:])
    plan = allocate(0.75, 0.95, 8, 4, lay, redistribute=True)
    w = ChunkLengths.from_layout(lay).weights()
    lhs = sum((1.0 - si) * wi for si, wi in zip(plan.s[1:], w[1:]))
    rhs = (1.0 - 0.75) * w[1:].sum()
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9)
    # free chunks got sparser to pay for the railed early chunks
    assert all(p >= b for p, b in zip(plan.s[3:], base.s[3:]))


def test_budget_for_chunk_bounds():
    plan = allocate(0.9, 0.98, 7, 4, STOCK_LAYOUT)
    assert budget_for_chunk(plan, 2, STOCK_LAYOUT) == plan.budgets[1]
    with pytest.raises(IndexError):
        budget_for_chunk(plan, 0, STOCK_LAYOUT)
    with pytest.raises(IndexError):
        budget_for_chunk(plan, 8, STOCK_LAYOUT)


# ---------------------------------------------------------------------------
# tv_bound


def test_tv_bound_exact_value():
    # d=1, t=e^2, c1=1: 1 * 2^3 / e + 0
    np.testing.assert_allclose(tv_bound(1, math.e ** 2, 0.0, 1.0), 8.0 / math.e, rtol=1e-12)


def test_tv_bound_second_term():
    t = math.e
    expect = 2.0 * 16.0 / math.sqrt(t) + 2.0 * 2.0 * 0.5 * 1.0
    np.testing.assert_allclose(tv_bound(4, t, 0.5, 2.0), expect, rtol=1e-12)


def test_tv_bound_decreases_past_turning_point():
    ts = np.exp(np.linspace(6.5, 12, 12))
    vals = [tv_bound(8, t, 0.0, 1.0) for t in ts]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_tv_bound_validation():
    with pytest.raises(ValueError):
        tv_bound(8, 1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        tv_bound(0, 10.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        tv_bound(8, 10.0, -0.1, 1.0)
    with pytest.raises(ValueError):
        tv_bound(8, 10.0, 0.0, 0.0)


# ---------------------------------------------------------------------------
# serialization


def test_plan_json_round_trip():
    plan = allocate(0.9, 0.98, 7, 4, STOCK_LAYOUT)
    text = plan_to_json(plan, STOCK_LAYOUT)
    back, lay = plan_from_json(text)
    assert lay == STOCK_LAYOUT
    assert back == plan
    # canonical form: stable across a second serialization
    assert plan_to_json(back, lay) == text
    assert text.endswith("\n")
