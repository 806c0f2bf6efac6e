"""Per-chunk sparsity planning for chunked autoregressive rollouts.

Chunk i gets sparsity s_i = s_base - alpha_i * beta: alpha is a decreasing
error-weight schedule (early chunks carry more downstream error, so they
stay denser) and beta is solved in closed form so the planned attention
FLOPs equal what a uniform sparsity of s_target would cost. Ratios are
clamped to [0, s_max(i)] where s_max(i) keeps the mandatory current-chunk
tiles active; clamping is reported, not silently re-balanced (an optional
redistribution pass re-solves beta over the unclamped chunks).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from chunkattn.attention import ChunkLayout
from chunkattn.reports import canonical_json


class DegenerateScheduleError(ValueError):
    """The error-weight schedule cannot support a beta solve."""


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class ChunkLengths:
    """Query/key token counts per chunk; l_k grows with the cached context."""

    l_q: int
    l_k: tuple[int, ...]
    d: int

    def __post_init__(self):
        if self.l_q < 1 or self.d < 1 or len(self.l_k) < 1:
            raise ValueError("lengths must be non-empty and positive")
        if any(b <= a for a, b in zip(self.l_k, self.l_k[1:])):
            raise ValueError("l_k must be strictly increasing")

    @classmethod
    def from_layout(cls, layout: ChunkLayout) -> "ChunkLengths":
        lq = layout.chunk_tokens
        return cls(l_q=lq, l_k=tuple(i * lq for i in range(1, layout.N + 1)), d=layout.d)

    def weights(self) -> np.ndarray:
        """Per-chunk attention cost weights w_i = l_q * l_k_i * d."""
        return np.asarray([self.l_q * lk * self.d for lk in self.l_k], dtype=np.float64)


def alpha_schedule(N: int, T: int) -> np.ndarray:
    """Error weights alpha_i = 1/sqrt(i*T), normalized so max(alpha) == 1.

    Chunk i has i*T effective denoising steps behind it; the residual error
    it contributes scales like the inverse square root of that count. The
    normalization only fixes beta's scale.
    """
    if N < 1 or T < 1:
        raise ValueError(f"N and T must be >= 1, got N={N}, T={T}")
    raw = 1.0 / np.sqrt(np.arange(1, N + 1, dtype=np.float64) * T)
    return raw / raw.max()


def solve_beta(s_target: float, s_base: float, alpha: np.ndarray,
               lengths: ChunkLengths) -> float:
    """Closed-form beta = (s_base - s_target) * sum(w) / sum(alpha * w).

    This is the unique beta for which sum((1 - s_i) * w_i) equals
    (1 - s_target) * sum(w_i) with s_i = s_base - alpha_i * beta.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    w = lengths.weights()
    if alpha.shape != w.shape:
        raise ValueError(f"alpha length {alpha.shape[0]} != chunk count {w.shape[0]}")
    denom = float(np.dot(alpha, w))
    if denom <= 0.0:
        raise DegenerateScheduleError("sum(alpha_i * w_i) must be positive")
    return (s_base - s_target) * float(w.sum()) / denom


@dataclass(frozen=True)
class SparsityPlan:
    """Solved per-chunk sparsity schedule.

    s and budgets are indexed by chunk (entry 0 is chunk 1). clamped marks
    chunks whose raw s_base - alpha_i*beta fell outside [0, s_max(i)].
    achieved_flops_ratio is sum((1-s_i)*w_i)/sum(w_i) over the planned
    chunks (chunks 2..N when first_chunk_dense); it equals 1 - s_target
    only when nothing clamped.
    """

    s_target: float
    s_base: float
    T: int
    alpha: tuple[float, ...]
    beta: float
    s: tuple[float, ...]
    budgets: tuple[int, ...]
    clamped: tuple[bool, ...]
    first_chunk_dense: bool
    achieved_flops_ratio: float

    @property
    def N(self) -> int:
        return len(self.s)


def s_max_for_chunk(i: int, layout: ChunkLayout) -> float:
    """Largest admissible sparsity at chunk i: the current chunk's tiles stay active."""
    current = layout.f * layout.frame_kv_blocks
    return 1.0 - current / layout.total_blocks(i)


def chunk_block_budget(s_i: float, i: int, layout: ChunkLayout) -> int:
    """Active key blocks per query row at chunk i: round-half-up of (1-s_i)*total."""
    if not 0.0 <= s_i <= 1.0:
        raise ValueError(f"sparsity {s_i} outside [0, 1]")
    return round_half_up((1.0 - s_i) * layout.total_blocks(i))


def allocate(s_target: float, s_base: float, N: int, T: int, layout: ChunkLayout,
             first_chunk_dense: bool = True, redistribute: bool = False) -> SparsityPlan:
    """Solve the full plan: alpha schedule, beta, clamped s_i, block budgets.

    With first_chunk_dense, chunk 1 is pinned at s=0 and beta is re-solved
    over chunks 2..N so those chunks alone meet the s_target FLOPs total.
    """
    if not 0.0 <= s_target < 1.0 or not 0.0 <= s_base <= 1.0:
        raise ValueError("need 0 <= s_target < 1 and 0 <= s_base <= 1")
    if s_target > s_base:
        raise ValueError(
            f"s_target {s_target} > s_base {s_base}: the schedule would shrink "
            "sparsity for later chunks instead of growing it")
    if N != layout.N:
        raise ValueError(f"N {N} != layout.N {layout.N}")

    alpha = alpha_schedule(N, T)
    lengths = ChunkLengths.from_layout(layout)
    w = lengths.weights()
    s_hi = np.asarray([s_max_for_chunk(i, layout) for i in range(1, N + 1)])

    planned = np.ones(N, dtype=bool)
    if first_chunk_dense:
        planned[0] = False
    if not planned.any():
        # N == 1 with a forced-dense first chunk: nothing to solve
        beta = 0.0
        s = np.zeros(1)
        clamped = np.zeros(1, dtype=bool)
    else:
        beta, s, clamped = _solve_clamped(planned, s_target, s_base, alpha, w,
                                          s_hi, redistribute)
    s[~planned] = 0.0
    clamped[~planned] = False

    budgets = tuple(chunk_block_budget(float(s[i - 1]), i, layout) for i in range(1, N + 1))
    wp = float(w[planned].sum()) if planned.any() else float(w.sum())
    achieved = float(((1.0 - s[planned]) * w[planned]).sum()) / wp if planned.any() else 1.0
    return SparsityPlan(
        s_target=float(s_target),
        s_base=float(s_base),
        T=int(T),
        alpha=tuple(float(a) for a in alpha),
        beta=float(beta),
        s=tuple(float(x) for x in s),
        budgets=budgets,
        clamped=tuple(bool(c) for c in clamped),
        first_chunk_dense=bool(first_chunk_dense),
        achieved_flops_ratio=achieved,
    )


def _solve_clamped(planned: np.ndarray, s_target: float, s_base: float,
                   alpha: np.ndarray, w: np.ndarray, s_hi: np.ndarray,
                   redistribute: bool) -> tuple[float, np.ndarray, np.ndarray]:
    """Solve beta over the planned chunks, clamping s into [0, s_max].

    Without redistribution this is one solve followed by one clamp. With it,
    clamped chunks are frozen and beta is re-solved over the rest until no
    new chunk clamps; the FLOPs freed (or consumed) by clamped chunks is
    folded into the residual target.
    """
    target_flops = (1.0 - s_target) * float(w[planned].sum())
    s = np.zeros(len(w))
    clamped = np.zeros(len(w), dtype=bool)
    free = planned.copy()
    while True:
        denom = float(np.dot(alpha[free], w[free]))
        if denom <= 0.0:
            raise DegenerateScheduleError("no solvable chunks left")
        fixed = planned & ~free
        residual = target_flops - float(((1.0 - s[fixed]) * w[fixed]).sum())
        w_free = float(w[free].sum())
        # sum over free of (1 - s_base + alpha*beta) * w == residual
        beta = (residual - (1.0 - s_base) * w_free) / denom
        raw = s_base - alpha * beta
        s[free] = np.clip(raw[free], 0.0, s_hi[free])
        newly = free & (raw != s)
        clamped |= newly
        if not redistribute or not newly.any() or not (free & ~newly).any():
            break
        free = free & ~newly
    return float(beta), s, clamped


def budget_for_chunk(plan: SparsityPlan, i: int, layout: ChunkLayout) -> int:
    """Active-block budget for chunk i (1-based) from a solved plan."""
    if not 1 <= i <= plan.N:
        raise IndexError(f"chunk {i} outside 1..{plan.N}")
    return plan.budgets[i - 1]


def tv_bound(d: int, t: float, eps_score: float, c1: float) -> float:
    """Diagnostic drift bound c1*d^2*ln(t)^3/sqrt(t) + c1*sqrt(d)*eps*ln(t)^2.

    The first term decays once t clears the turning point of ln(t)^3/sqrt(t)
    (at ln t = 6); the second is the score-error floor that extra steps
    cannot remove. Feeds no control flow anywhere.
    """
    if t <= 1.0:
        raise ValueError(f"t must exceed 1, got {t}")
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    if eps_score < 0.0:
        raise ValueError(f"eps_score must be >= 0, got {eps_score}")
    if c1 <= 0.0:
        raise ValueError(f"c1 must be positive, got {c1}")
    lg = math.log(t)
    return c1 * d * d * lg ** 3 / math.sqrt(t) + c1 * math.sqrt(d) * eps_score * lg ** 2


def plan_to_json(plan: SparsityPlan, layout: ChunkLayout) -> str:
    """Canonical JSON for a plan, embedding the layout it was solved against."""
    return canonical_json({
        "s_target": plan.s_target,
        "s_base": plan.s_base,
        "T": plan.T,
        "alpha": list(plan.alpha),
        "beta": plan.beta,
        "s": list(plan.s),
        "budgets": list(plan.budgets),
        "clamped": list(plan.clamped),
        "first_chunk_dense": plan.first_chunk_dense,
        "achieved_flops_ratio": plan.achieved_flops_ratio,
        "layout": {"f": layout.f, "n": layout.n, "b_q": layout.b_q,
                   "b_kv": layout.b_kv, "d": layout.d, "N": layout.N},
    })


def plan_from_json(text: str) -> tuple[SparsityPlan, ChunkLayout]:
    data = json.loads(text)
    lay = data["layout"]
    layout = ChunkLayout(f=lay["f"], n=lay["n"], b_q=lay["b_q"],
                         b_kv=lay["b_kv"], d=lay["d"], N=lay["N"])
    plan = SparsityPlan(
        s_target=data["s_target"],
        s_base=data["s_base"],
        T=data["T"],
        alpha=tuple(data["alpha"]),
        beta=data["beta"],
        s=tuple(data["s"]),
        budgets=tuple(int(b) for b in data["budgets"]),
        clamped=tuple(bool(c) for c in data["clamped"]),
        first_chunk_dense=bool(data["first_chunk_dense"]),
        achieved_flops_ratio=data["achieved_flops_ratio"],
    )
    return plan, layout
