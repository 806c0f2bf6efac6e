"""CPU block-sparse attention with two-stage mask selection, per-chunk
sparsity budgeting, and a toy denoising rollout for divergence studies."""

from chunkattn.attention import (
    AttnStats,
    BlockMask,
    ChunkLayout,
    ZeroActiveRowError,
    block_sparse_attention,
    dense_attention,
)
from chunkattn.numerics import (
    EmptyActiveSetError,
    TopKResult,
    mean_pool,
    stable_softmax_row,
    topk_indices,
)
from chunkattn.planner import (
    ChunkLengths,
    DegenerateScheduleError,
    SparsityPlan,
    allocate,
    alpha_schedule,
    budget_for_chunk,
    chunk_block_budget,
    plan_from_json,
    plan_to_json,
    solve_beta,
    tv_bound,
)
from chunkattn.rollout import (
    DenseBackend,
    DivergenceReport,
    FixedMaskBackend,
    HsaBackend,
    NoiseSchedule,
    RolloutState,
    ToyGenerator,
    compare_rollouts,
    denoise_step,
    fit_noise_level,
    gaussian_field,
    matched_budget_settings,
    rollout,
)
from chunkattn.selection import (
    CompressedViews,
    QueryBlockSelection,
    SelectionConfig,
    build_mask,
    compress,
    frame_scores,
    hsa_attention,
    select_blocks,
    select_frames,
)

__version__ = "0.1.0"

__all__ = [
    "AttnStats",
    "BlockMask",
    "ChunkLayout",
    "ChunkLengths",
    "CompressedViews",
    "DegenerateScheduleError",
    "DenseBackend",
    "DivergenceReport",
    "EmptyActiveSetError",
    "FixedMaskBackend",
    "HsaBackend",
    "NoiseSchedule",
    "QueryBlockSelection",
    "RolloutState",
    "SelectionConfig",
    "SparsityPlan",
    "TopKResult",
    "ToyGenerator",
    "ZeroActiveRowError",
    "allocate",
    "alpha_schedule",
    "block_sparse_attention",
    "budget_for_chunk",
    "build_mask",
    "chunk_block_budget",
    "compare_rollouts",
    "compress",
    "dense_attention",
    "denoise_step",
    "fit_noise_level",
    "frame_scores",
    "gaussian_field",
    "hsa_attention",
    "matched_budget_settings",
    "mean_pool",
    "plan_from_json",
    "plan_to_json",
    "rollout",
    "select_blocks",
    "select_frames",
    "solve_beta",
    "stable_softmax_row",
    "topk_indices",
    "tv_bound",
]
