"""Deterministic numeric primitives shared by the attention and planning modules.

All kernels work on row-major 2-D float32 arrays ("matrices"). Reductions that
feed softmax normalization are accumulated in float64 so that results stay
comparable to high-precision oracles at 1e-5 tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EmptyActiveSetError(ValueError):
    """Softmax was asked to normalize over an empty active set."""


@dataclass(frozen=True)
class TopKResult:
    """Indices of the k largest scores, ties broken by ascending index.

    ``scores`` is non-increasing and aligned with ``indices``.
    """

    indices: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate a 2-D finite float array and return it as float32."""
    arr = np.asarray(a)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"{name} must be non-empty 2-D, got shape {arr.shape}")
    arr = arr.astype(np.float32, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def mean_pool(x: np.ndarray, group: int) -> np.ndarray:
    """Average consecutive groups of ``group`` rows.

    The output has ceil(rows / group) rows; a trailing partial group is
    averaged over its actual size, not zero-padded.
    """
    if group < 1:
        raise ValueError(f"pool size must be >= 1, got {group}")
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"expected non-empty 2-D input, got shape {x.shape}")
    rows = x.shape[0]
    if rows % group == 0:
        # aligned case: a contiguous reshape reduction is several times
        # faster than reduceat and accumulates in float64 just the same
        sums = x.reshape(-1, group, x.shape[1]).sum(axis=1, dtype=np.float64)
        out = sums / group
    else:
        starts = np.arange(0, rows, group)
        sums = np.add.reduceat(x, starts, axis=0, dtype=np.float64)
        sizes = np.minimum(starts + group, rows) - starts
        out = sums / sizes[:, None]
    return out.astype(x.dtype, copy=False)


def stable_softmax_row(logits: np.ndarray, active: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the ``active`` index set; inactive entries are exactly 0.

    Statistics (max, denominator) are computed in float64. ``active=None``
    means all positions are active.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ValueError(f"expected 1-D logits, got shape {logits.shape}")
    if active is None:
        active = np.arange(logits.shape[0])
    else:
        active = np.asarray(active, dtype=np.intp)
    if active.size == 0:
        raise EmptyActiveSetError("softmax row has no active entries")
    picked = logits[active]
    e = np.exp(picked - picked.max())
    out = np.zeros(logits.shape[0], dtype=np.float64)
    out[active] = e / e.sum()
    return out


def topk_indices(scores: np.ndarray, k: int) -> TopKResult:
    """Indices of the ``k`` largest scores, deterministic under ties.

    Ties are broken by ascending index; ``k`` is clamped to [0, len(scores)].
    """
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    scores = np.asarray(scores)
    if scores.ndim != 1:
        raise ValueError(f"expected 1-D scores, got shape {scores.shape}")
    k = min(k, scores.shape[0])
    # Stable sort on negated scores keeps equal scores in index order.
    order = np.argsort(-scores, kind="stable")[:k]
    return TopKResult(indices=order, scores=scores[order])
