"""Block-tiled attention kernels.

A streaming dense reference and a tile-skipping block-sparse kernel. Both
share one online-softmax accumulator: key tiles are visited left to right
while a running max, denominator, and weighted value sum are maintained, so
the full score matrix is never materialized. Inactive tiles are skipped
entirely (their logits are excluded from the softmax, equivalent to -inf;
they are never scored as 0).

Precision: tile products q kᵀ run in float32; softmax statistics and the
value accumulator run in float64; outputs are cast back to float32.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from chunkattn.numerics import as_matrix

# Row-panel height for the dense reference path and the cap on key-span
# width for both paths; 128 x 512 float64 score panels stay cache-resident
# on small CPUs, which is worth ~1.5x over full-width panels.
_DENSE_ROW_BLOCK = 128
_KEY_SPAN = 512


def _split_spans(token_spans, limit: int = _KEY_SPAN) -> list[tuple[int, int]]:
    """Cut token spans into pieces of at most ``limit`` keys."""
    pieces = []
    for start, stop in token_spans:
        for c in range(start, stop, limit):
            pieces.append((c, min(c + limit, stop)))
    return pieces


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class ChunkLayout:
    """Tiling geometry for a chunked rollout.

    f frames per chunk, n tokens per frame, b_q x b_kv tiles, head
    dimension d, N chunks total. Derived block counts use ceilings, so
    ragged trailing tiles are allowed.
    """

    f: int
    n: int
    b_q: int
    b_kv: int
    d: int
    N: int

    def __post_init__(self):
        for name in ("f", "n", "b_q", "b_kv", "d", "N"):
            if getattr(self, name) < 1:
                raise ValueError(f"layout field {name} must be >= 1, got {getattr(self, name)}")

    @property
    def chunk_tokens(self) -> int:
        return self.f * self.n

    @property
    def q_blocks(self) -> int:
        """Query-block rows per chunk."""
        return ceil_div(self.f * self.n, self.b_q)

    @property
    def frame_kv_blocks(self) -> int:
        """Key blocks per latent frame."""
        return ceil_div(self.n, self.b_kv)

    def context_tokens(self, i: int) -> int:
        """Key/value rows visible while generating chunk i."""
        self.check_chunk(i)
        return i * self.f * self.n

    def k_blocks(self, i: int) -> int:
        """Key-block columns over the full context at chunk i."""
        return ceil_div(self.context_tokens(i), self.b_kv)

    def total_blocks(self, i: int) -> int:
        """Frame-aligned candidate block count at chunk i: i * f * frame_kv_blocks."""
        self.check_chunk(i)
        return i * self.f * self.frame_kv_blocks

    def check_chunk(self, i: int) -> None:
        if not 1 <= i <= self.N:
            raise ValueError(f"chunk index {i} outside 1..{self.N}")


class ZeroActiveRowError(ValueError):
    """A query-block row has no active key blocks."""


@dataclass
class BlockMask:
    """Boolean tile grid: bits[r, c] marks (query block r, key block c) active."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {bits.shape}")
        self.bits = bits.astype(bool, copy=False)

    @property
    def n_q(self) -> int:
        return self.bits.shape[0]

    @property
    def n_k(self) -> int:
        return self.bits.shape[1]

    @classmethod
    def full(cls, n_q: int, n_k: int) -> "BlockMask":
        return cls(np.ones((n_q, n_k), dtype=bool))

    def popcount(self) -> int:
        return int(self.bits.sum())

    def row_popcounts(self) -> np.ndarray:
        return self.bits.sum(axis=1)

    def to_pgm(self, path) -> None:
        """Binary PGM (P5), one pixel per tile, 255 = active."""
        header = f"P5\n{self.n_k} {self.n_q}\n255\n".encode("ascii")
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write((self.bits.astype(np.uint8) * 255).tobytes())


@dataclass
class AttnStats:
    """Cost accounting for one kernel call.

    flop_estimate counts multiply-adds of the QK and PV tile products at
    nominal tile size (active_tiles * b_q * b_kv * d * 2); softmax exp/div
    are excluded. select_time and budget_clamped are filled by the
    two-stage selection front end, not the kernel.
    """

    active_tiles: int
    total_tiles: int
    flop_estimate: int
    wall_time: float
    select_time: float = 0.0
    budget_clamped: bool = False


def _row_spans(row_bits: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of consecutive active key blocks, as [start, stop) pairs."""
    idx = np.flatnonzero(row_bits)
    if idx.size == 0:
        raise ZeroActiveRowError("query-block row has no active key blocks")
    cuts = np.flatnonzero(np.diff(idx) > 1) + 1
    return [(int(g[0]), int(g[-1]) + 1) for g in np.split(idx, cuts)]


def _stream_rows(q_rows: np.ndarray, k: np.ndarray, v64: np.ndarray,
                 token_spans, inv_scale: float) -> np.ndarray:
    """Online softmax-attention for one query panel over the given key spans."""
    m = denom = acc = None
    for start, stop in token_spans:
        s = (q_rows @ k[start:stop].T).astype(np.float64)
        s *= inv_scale
        span_max = s.max(axis=1)
        if m is None:
            m = span_max
            e = np.exp(s - m[:, None])
            denom = e.sum(axis=1)
            acc = e @ v64[start:stop]
        else:
            m_new = np.maximum(m, span_max)
            carry = np.exp(m - m_new)
            e = np.exp(s - m_new[:, None])
            denom = denom * carry + e.sum(axis=1)
            acc = acc * carry[:, None] + e @ v64[start:stop]
            m = m_new
    return acc / denom[:, None]


def _check_qkv(q, k, v) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    q = as_matrix(q, "q")
    k = as_matrix(k, "k")
    v = as_matrix(v, "v")
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"q cols {q.shape[1]} != k cols {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"k rows {k.shape[0]} != v rows {v.shape[0]}")
    return q, k, v


def _run_rows(fn, starts, threads: int) -> None:
    if threads <= 1:
        for r in starts:
            fn(r)
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            # materialize to surface worker exceptions
            list(ex.map(fn, starts))


def dense_attention(q, k, v, threads: int = 1) -> np.ndarray:
    """Full softmax(q kᵀ/√d) v, streamed over row panels."""
    q, k, v = _check_qkv(q, k, v)
    d = q.shape[1]
    inv_scale = 1.0 / math.sqrt(d)
    v64 = v.astype(np.float64)
    spans = _split_spans([(0, k.shape[0])])
    out = np.empty((q.shape[0], v.shape[1]), dtype=np.float32)

    def run(r0: int) -> None:
        r1 = min(r0 + _DENSE_ROW_BLOCK, q.shape[0])
        out[r0:r1] = _stream_rows(q[r0:r1], k, v64, spans, inv_scale)

    _run_rows(run, range(0, q.shape[0], _DENSE_ROW_BLOCK), threads)
    return out


def block_sparse_attention(q, k, v, mask: BlockMask, layout: ChunkLayout,
                           threads: int = 1) -> tuple[np.ndarray, AttnStats]:
    """Attention restricted to the active tiles of ``mask``.

    Only active tiles' products are computed; consecutive active key blocks
    are coalesced into contiguous spans so a full mask costs the same as the
    dense path. Output rows owned by distinct query blocks are independent,
    so the row loop may be threaded without changing results.
    """
    q, k, v = _check_qkv(q, k, v)
    if q.shape[1] != layout.d:
        raise ValueError(f"q cols {q.shape[1]} != layout d {layout.d}")
    n_q = ceil_div(q.shape[0], layout.b_q)
    n_k = ceil_div(k.shape[0], layout.b_kv)
    if (mask.n_q, mask.n_k) != (n_q, n_k):
        raise ValueError(
            f"mask is {mask.n_q}x{mask.n_k}, expected {n_q}x{n_k} "
            f"for {q.shape[0]} queries, {k.shape[0]} keys")

    t0 = time.perf_counter()
    spans = [_row_spans(mask.bits[r]) for r in range(n_q)]
    inv_scale = 1.0 / math.sqrt(layout.d)
    v64 = v.astype(np.float64)
    rows = q.shape[0]
    keys = k.shape[0]
    b_q, b_kv = layout.b_q, layout.b_kv
    out = np.empty((rows, v.shape[1]), dtype=np.float32)

    def run(r: int) -> None:
        q0 = r * b_q
        q1 = min(q0 + b_q, rows)
        token_spans = _split_spans(
            [(j0 * b_kv, min(j1 * b_kv, keys)) for j0, j1 in spans[r]])
        out[q0:q1] = _stream_rows(q[q0:q1], k, v64, token_spans, inv_scale)

    _run_rows(run, range(n_q), threads)
    wall = time.perf_counter() - t0

    active = mask.popcount()
    stats = AttnStats(
        active_tiles=active,
        total_tiles=n_q * n_k,
        flop_estimate=active * b_q * b_kv * layout.d * 2,
        wall_time=wall,
    )
    return out, stats
