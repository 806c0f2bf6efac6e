"""Two-stage mask selection: coarse frame retrieval, then block picking.

Queries and keys are summarized by mean pooling at two granularities.
Blockwise summaries (one row per b_q or b_kv tokens) feed fine-grained
block scoring; framewise key summaries (one row per latent frame, pooled
from the blockwise rows) feed a cheap top-k retrieval over past frames.
Each query block keeps the current chunk fully visible, retrieves its
top-k past frames, and spends a block budget inside those frames. The
result is a BlockMask for the sparse kernel.

Selection scores are raw inner products of the pooled summaries; the
1/sqrt(d) scaling lives only inside the attention kernel (it cannot change
a top-k outcome).

This path requires b_q and b_kv to divide n, so tiles never straddle frame
boundaries; the kernel itself has no such restriction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from chunkattn.attention import (
    AttnStats,
    BlockMask,
    ChunkLayout,
    block_sparse_attention,
)
from chunkattn.numerics import mean_pool, topk_indices
from chunkattn.planner import chunk_block_budget

_BUDGET_MODES = ("global", "per-frame")
_CHUNK_POLICIES = ("dense-within-chunk",)


@dataclass(frozen=True)
class SelectionConfig:
    topk_frames: int = 6
    current_chunk_policy: str = "dense-within-chunk"
    block_budget_mode: str = "global"

    def __post_init__(self):
        if self.topk_frames < 0:
            raise ValueError(f"topk_frames must be >= 0, got {self.topk_frames}")
        if self.current_chunk_policy not in _CHUNK_POLICIES:
            raise ValueError(f"unknown current_chunk_policy {self.current_chunk_policy!r}")
        if self.block_budget_mode not in _BUDGET_MODES:
            raise ValueError(f"unknown block_budget_mode {self.block_budget_mode!r}")


@dataclass(frozen=True)
class CompressedViews:
    """Pooled summaries for one chunk's queries over the full key context.

    q_block: one row per query block of the current chunk.
    k_block: one row per key block over all i chunks.
    k_frame: one row per past latent frame (current chunk excluded).
    """

    q_block: np.ndarray
    k_block: np.ndarray
    k_frame: np.ndarray
    blocks_per_frame: int

    @property
    def past_frames(self) -> int:
        return self.k_frame.shape[0]


@dataclass(frozen=True)
class QueryBlockSelection:
    """What one query block looks at beyond the always-active current chunk.

    frames are absolute past-frame indices; blocks are (frame, block) pairs
    with frame-local block indices, sorted ascending. block_scores aligns
    with blocks (kept for trace dumps).
    """

    frames: tuple[int, ...]
    blocks: tuple[tuple[int, int], ...]
    budget_used: int
    block_scores: tuple[float, ...] = ()


def _require_frame_aligned(layout: ChunkLayout) -> None:
    if layout.n % layout.b_q or layout.n % layout.b_kv:
        raise ValueError(
            f"selection needs b_q and b_kv to divide n: "
            f"n={layout.n}, b_q={layout.b_q}, b_kv={layout.b_kv}")


def compress(q: np.ndarray, k: np.ndarray, chunk_index: int,
             layout: ChunkLayout) -> CompressedViews:
    """Mean-pool q and k into blockwise summaries plus past framewise ones."""
    _require_frame_aligned(layout)
    layout.check_chunk(chunk_index)
    q = np.asarray(q)
    k = np.asarray(k)
    if q.shape != (layout.chunk_tokens, layout.d):
        raise ValueError(f"q shape {q.shape}, expected ({layout.chunk_tokens}, {layout.d})")
    ctx = layout.context_tokens(chunk_index)
    if k.shape != (ctx, layout.d):
        raise ValueError(f"k shape {k.shape}, expected ({ctx}, {layout.d})")
    bpf = layout.frame_kv_blocks
    q_block = mean_pool(q, layout.b_q)
    k_block = mean_pool(k, layout.b_kv)
    # framewise rows pool the blockwise summaries frame by frame
    k_frame_all = mean_pool(k_block, bpf)
    past = (chunk_index - 1) * layout.f
    return CompressedViews(q_block=q_block, k_block=k_block,
                           k_frame=k_frame_all[:past], blocks_per_frame=bpf)


def frame_scores(views: CompressedViews, r: int) -> np.ndarray:
    """Retrieval logits of query block r against every past frame summary."""
    if not 0 <= r < views.q_block.shape[0]:
        raise ValueError(f"query block {r} outside 0..{views.q_block.shape[0] - 1}")
    qv = views.q_block[r].astype(np.float64)
    return views.k_frame.astype(np.float64) @ qv


def select_frames(p: np.ndarray, cfg: SelectionConfig, chunk_index: int,
                  layout: ChunkLayout) -> np.ndarray:
    """Top-k past frames by score, plus all frames of the current chunk."""
    p = np.asarray(p, dtype=np.float64)
    past = (chunk_index - 1) * layout.f
    if p.shape != (past,):
        raise ValueError(f"expected {past} past-frame scores, got shape {p.shape}")
    picked = topk_indices(p, cfg.topk_frames).indices
    current = np.arange(past, past + layout.f)
    return np.sort(np.concatenate([picked, current]))


def select_blocks(views: CompressedViews, r: int, frames, budget: int,
                  cfg: SelectionConfig) -> QueryBlockSelection:
    """Spend ``budget`` active blocks inside the selected past frames.

    Current-chunk frames in ``frames`` are ignored here; they are always
    fully active and not charged to the budget. In global mode the budget
    ranks all candidate blocks together; in per-frame mode each frame gets
    ceil(budget/frames) picks and the frame-ascending concatenation is
    truncated to the total. Ties break on ascending (frame, block).
    """
    if budget < 0:
        raise ValueError(f"budget must be >= 0, got {budget}")
    past = sorted(int(t) for t in np.asarray(frames).ravel() if t < views.past_frames)
    if not past or budget == 0:
        return QueryBlockSelection(frames=tuple(past), blocks=(), budget_used=0)

    bpf = views.blocks_per_frame
    qv = views.q_block[r].astype(np.float64)
    kb = views.k_block.astype(np.float64)
    # candidate rows in ascending (frame, block) order
    cand = np.concatenate([np.arange(t * bpf, (t + 1) * bpf) for t in past])
    scores = kb[cand] @ qv

    if cfg.block_budget_mode == "global":
        top = topk_indices(scores, budget)
        order = np.sort(top.indices)
    else:
        per = -(-budget // len(past))
        picks: list[int] = []
        for fi in range(len(past)):
            local = topk_indices(scores[fi * bpf:(fi + 1) * bpf], per)
            picks.extend(fi * bpf + j for j in local.indices)
        order = np.sort(np.asarray(picks[:budget], dtype=np.intp))

    chosen = cand[order]
    blocks = tuple((int(c) // bpf, int(c) % bpf) for c in chosen)
    return QueryBlockSelection(frames=tuple(past), blocks=blocks,
                               budget_used=len(blocks),
                               block_scores=tuple(float(s) for s in scores[order]))


def build_mask(selections: list[QueryBlockSelection], chunk_index: int,
               layout: ChunkLayout) -> BlockMask:
    """Assemble the kernel mask: current chunk dense, past blocks as selected."""
    _require_frame_aligned(layout)
    n_q = layout.q_blocks
    if len(selections) != n_q:
        raise ValueError(f"{len(selections)} selections for {n_q} query blocks")
    bpf = layout.frame_kv_blocks
    n_k = layout.total_blocks(chunk_index)
    past_cols = (chunk_index - 1) * layout.f * bpf
    bits = np.zeros((n_q, n_k), dtype=bool)
    bits[:, past_cols:] = True
    for r, sel in enumerate(selections):
        for tau, j in sel.blocks:
            bits[r, tau * bpf + j] = True
    return BlockMask(bits)


def hsa_attention(q, k, v, chunk_index: int, s_i: float, cfg: SelectionConfig,
                  layout: ChunkLayout, threads: int = 1
                  ) -> tuple[np.ndarray, AttnStats, BlockMask]:
    """Full pipeline: compress, retrieve frames, pick blocks, run the kernel.

    The first chunk is always dense within itself regardless of s_i. The
    block budget per query row comes from s_i; if it falls below the
    mandatory current-chunk block count, the past budget clamps to 0 and
    stats.budget_clamped is set.
    """
    if not 0.0 <= s_i < 1.0:
        raise ValueError(f"s_i must lie in [0, 1), got {s_i}")
    _require_frame_aligned(layout)

    t0 = time.perf_counter()
    views = compress(q, k, chunk_index, layout)
    current_blocks = layout.f * layout.frame_kv_blocks
    if chunk_index == 1:
        total_budget = current_blocks
    else:
        total_budget = chunk_block_budget(s_i, chunk_index, layout)
    past_budget = max(0, total_budget - current_blocks)
    clamped = total_budget < current_blocks

    selections = []
    for r in range(views.q_block.shape[0]):
        p = frame_scores(views, r)
        fset = select_frames(p, cfg, chunk_index, layout)
        selections.append(select_blocks(views, r, fset, past_budget, cfg))
    mask = build_mask(selections, chunk_index, layout)
    select_time = time.perf_counter() - t0

    out, stats = block_sparse_attention(q, k, v, mask, layout, threads=threads)
    stats.select_time = select_time
    stats.budget_clamped = clamped
    return out, stats, mask


def selection_trace(selections: list[QueryBlockSelection],
                    frame_score_rows: list[np.ndarray] | None = None) -> list[dict]:
    """JSON-ready per-query-block record of what was selected and why."""
    rows = []
    for r, sel in enumerate(selections):
        row = {
            "query_block": r,
            "frames": list(sel.frames),
            "blocks": [list(b) for b in sel.blocks],
            "block_scores": list(sel.block_scores),
            "budget_used": sel.budget_used,
        }
        if frame_score_rows is not None:
            row["frame_scores"] = [float(x) for x in frame_score_rows[r]]
        rows.append(row)
    return rows
