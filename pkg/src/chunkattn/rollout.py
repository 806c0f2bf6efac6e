"""Toy chunked autoregressive rollout driving the attention stack.

A deterministic single-block pseudo-model generates N chunks sequentially.
Each chunk starts as pure noise and is refined over T denoising steps;
every step runs attention over [cached clean context | current chunk]
through a pluggable backend, so sparse-vs-dense output differences are
attributable to masking alone. Between steps the estimate is re-noised to
the next lower level: x <- (1-sigma)*x_hat + sigma*eps.

Noise draws come from a counter-based stream keyed by (seed, chunk,
level), never from consumption order, so switching the attention backend
cannot change which noise any step sees.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from chunkattn.attention import (
    AttnStats,
    BlockMask,
    ChunkLayout,
    block_sparse_attention,
    ceil_div,
    dense_attention,
)
from chunkattn.planner import SparsityPlan, plan_from_json, round_half_up
from chunkattn.selection import SelectionConfig, hsa_attention

BACKEND_KINDS = ("dense", "hsa", "fixed-mask")


@dataclass(frozen=True)
class NoiseSchedule:
    """Descending noise levels, one per step; sigma[0] must be 1 (pure noise).

    Step j (counted T..1) denoises an input at level sigma[T-j]; after the
    step the estimate is re-noised to sigma[T-j+1], except the final step
    (j=1), which returns the clean estimate.
    """

    sigma: tuple[float, ...] = (1.0, 0.75, 0.5, 0.25)

    def __post_init__(self):
        sig = tuple(float(s) for s in self.sigma)
        object.__setattr__(self, "sigma", sig)
        if len(sig) < 1:
            raise ValueError("schedule needs at least one level")
        if sig[0] != 1.0:
            raise ValueError(f"first level must be 1.0, got {sig[0]}")
        if any(not 0.0 < s <= 1.0 for s in sig):
            raise ValueError(f"levels must lie in (0, 1]: {sig}")
        if any(b >= a for a, b in zip(sig, sig[1:])):
            raise ValueError(f"levels must be strictly decreasing: {sig}")

    @property
    def T(self) -> int:
        return len(self.sigma)

    def level(self, j: int) -> float:
        """Noise level at step index j in 1..T (j=T is pure noise)."""
        if not 1 <= j <= self.T:
            raise ValueError(f"step {j} outside 1..{self.T}")
        return self.sigma[self.T - j]


def gaussian_field(seed: int, chunk: int, level: int, rows: int, cols: int) -> np.ndarray:
    """Standard-normal field from a Philox stream keyed by (seed, chunk, level).

    Box-Muller over the keyed uniform stream: element (r, c) depends only on
    the key and its flat index, so draws are independent of anything else the
    program samples.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"field shape must be positive, got {rows}x{cols}")
    key = np.array([np.uint64(seed), (np.uint64(chunk) << np.uint64(32)) | np.uint64(level)],
                   dtype=np.uint64)
    gen = np.random.Generator(np.random.Philox(key=key))
    n = rows * cols
    half = (n + 1) // 2
    u = gen.random(size=(2, half))
    radius = np.sqrt(-2.0 * np.log1p(-u[0]))  # 1-u in (0,1], log never sees 0
    theta = 2.0 * np.pi * u[1]
    z = np.concatenate([radius * np.cos(theta), radius * np.sin(theta)])[:n]
    return z.reshape(rows, cols).astype(np.float32)


@dataclass
class ToyGenerator:
    """Single attention block with d x d projections and an additive step bias.

    Weights are drawn once from the seed (std 1/sqrt(d) keeps activations
    O(1)); the forward pass is a pure function of (noisy chunk, step, cache).
    No feed-forward, normalization, or positional encoding: all cross-token
    routing goes through the attention backend under test.

    logit_gain scales the query projection so attention is peaked rather
    than near-uniform; without it, masking any key subset barely moves the
    output (every 64-row average looks alike) and backend comparisons lose
    their signal.
    """

    seed: int
    d: int
    steps: int
    logit_gain: float = 3.0
    proj_q: np.ndarray = field(init=False, repr=False)
    proj_k: np.ndarray = field(init=False, repr=False)
    proj_v: np.ndarray = field(init=False, repr=False)
    proj_out: np.ndarray = field(init=False, repr=False)
    time_embed: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.d < 1 or self.steps < 1:
            raise ValueError("d and steps must be >= 1")
        if self.logit_gain <= 0.0:
            raise ValueError(f"logit_gain must be positive, got {self.logit_gain}")
        rng = np.random.default_rng(self.seed)
        scale = 1.0 / math.sqrt(self.d)
        for name in ("proj_q", "proj_k", "proj_v", "proj_out"):
            w = rng.normal(0.0, scale, size=(self.d, self.d)).astype(np.float32)
            setattr(self, name, w)
        self.time_embed = rng.normal(0.0, 1.0, size=(self.steps, self.d)).astype(np.float32)

    def qkv(self, x: np.ndarray, j: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Project the noisy chunk at step j (1-based) into q, k, v rows."""
        if not 1 <= j <= self.steps:
            raise ValueError(f"step {j} outside 1..{self.steps}")
        xe = x + self.time_embed[j - 1]
        q = (xe @ self.proj_q) * np.float32(self.logit_gain)
        return q, xe @ self.proj_k, xe @ self.proj_v

    def cache_kv(self, clean: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Key/value rows a finished clean chunk contributes to the cache.

        Clean context carries no step bias; only the in-flight noisy chunk
        is step-conditioned.
        """
        return clean @ self.proj_k, clean @ self.proj_v


@dataclass
class RolloutState:
    """Mutable per-rollout state; kv_k/kv_v hold (chunk_index-1)*f*n clean rows."""

    kv_k: np.ndarray
    kv_v: np.ndarray
    current: np.ndarray
    chunk_index: int
    seed: int


@dataclass(frozen=True)
class DivergenceReport:
    per_chunk_rel_err: tuple[float, ...]
    cumulative: tuple[float, ...]
    settings_label: str = ""


class DenseBackend:
    """Reference backend: full attention, stats synthesized at full density."""

    name = "dense"

    def __init__(self, layout: ChunkLayout, threads: int = 1):
        self.layout = layout
        self.threads = threads
        self.stats_log: list[AttnStats] = []
        self.mask_log: list[BlockMask] = []

    def run(self, q, k, v, chunk_index: int) -> np.ndarray:
        t0 = time.perf_counter()
        out = dense_attention(q, k, v, threads=self.threads)
        wall = time.perf_counter() - t0
        lay = self.layout
        n_q = ceil_div(q.shape[0], lay.b_q)
        n_k = ceil_div(k.shape[0], lay.b_kv)
        tiles = n_q * n_k
        self.stats_log.append(AttnStats(
            active_tiles=tiles, total_tiles=tiles,
            flop_estimate=tiles * lay.b_q * lay.b_kv * lay.d * 2,
            wall_time=wall))
        self.mask_log.append(BlockMask.full(n_q, n_k))
        return out


class HsaBackend:
    """Two-stage mask selection driven by a sparsity plan."""

    name = "hsa"

    def __init__(self, layout: ChunkLayout, plan: SparsityPlan,
                 cfg: SelectionConfig | None = None, threads: int = 1):
        self.layout = layout
        self.plan = plan
        self.cfg = cfg or SelectionConfig()
        self.threads = threads
        self.stats_log: list[AttnStats] = []
        self.mask_log: list[BlockMask] = []

    def run(self, q, k, v, chunk_index: int) -> np.ndarray:
        s_i = self.plan.s[chunk_index - 1]
        out, stats, mask = hsa_attention(q, k, v, chunk_index, s_i, self.cfg,
                                         self.layout, threads=self.threads)
        self.stats_log.append(stats)
        self.mask_log.append(mask)
        return out


class FixedMaskBackend:
    """Random block mask with a fixed per-row budget for each chunk.

    Budgets count active key blocks per query row, drawn uniformly without
    replacement and keyed by (seed, chunk), so the mask is independent of
    the data. The current chunk is NOT forced active: this backend exists
    to sparsify arbitrary chunks (including the first) for ablations.
    """

    name = "fixed-mask"

    def __init__(self, layout: ChunkLayout, budgets, seed: int, threads: int = 1):
        self.layout = layout
        self.budgets = tuple(int(b) for b in budgets)
        if any(b < 1 for b in self.budgets):
            raise ValueError(f"per-row budgets must be >= 1: {self.budgets}")
        self.seed = seed
        self.threads = threads
        self.stats_log: list[AttnStats] = []
        self.mask_log: list[BlockMask] = []

    def mask_for_chunk(self, chunk_index: int, n_q: int, n_k: int) -> BlockMask:
        budget = min(self.budgets[chunk_index - 1], n_k)
        rng = np.random.default_rng([self.seed, chunk_index])
        bits = np.zeros((n_q, n_k), dtype=bool)
        for r in range(n_q):
            bits[r, rng.choice(n_k, size=budget, replace=False)] = True
        return BlockMask(bits)

    def run(self, q, k, v, chunk_index: int) -> np.ndarray:
        lay = self.layout
        n_q = ceil_div(q.shape[0], lay.b_q)
        n_k = ceil_div(k.shape[0], lay.b_kv)
        mask = self.mask_for_chunk(chunk_index, n_q, n_k)
        out, stats = block_sparse_attention(q, k, v, mask, lay, threads=self.threads)
        self.stats_log.append(stats)
        self.mask_log.append(mask)
        return out


def denoise_step(state: RolloutState, j: int, gen: ToyGenerator,
                 sched: NoiseSchedule, backend) -> np.ndarray:
    """One denoising step: estimate the clean chunk, then re-noise (except j=1).

    The clean estimate routes through attention over [cache | current chunk];
    re-noising draws eps from the (seed, chunk, level=j-1) stream.
    """
    if not 1 <= j <= sched.T:
        raise ValueError(f"step {j} outside 1..{sched.T}")
    q, k_cur, v_cur = gen.qkv(state.current, j)
    k_full = np.concatenate([state.kv_k, k_cur], axis=0)
    v_full = np.concatenate([state.kv_v, v_cur], axis=0)
    attn = backend.run(q, k_full, v_full, state.chunk_index)
    x_hat = attn @ gen.proj_out
    if j == 1:
        return x_hat
    sigma = sched.level(j - 1)
    eps = gaussian_field(state.seed, state.chunk_index, j - 1,
                         x_hat.shape[0], x_hat.shape[1])
    return ((1.0 - sigma) * x_hat + sigma * eps).astype(np.float32)


def rollout(N: int, gen: ToyGenerator, sched: NoiseSchedule, backend,
            layout: ChunkLayout) -> tuple[list[np.ndarray], list[list[AttnStats]]]:
    """Generate N chunks; returns clean chunks and per-chunk step stats."""
    if not 1 <= N <= layout.N:
        raise ValueError(f"N {N} outside 1..{layout.N}")
    if getattr(backend, "layout", None) != layout:
        raise ValueError("backend was built for a different layout")
    if gen.d != layout.d:
        raise ValueError(f"generator d {gen.d} != layout d {layout.d}")
    if gen.steps != sched.T:
        raise ValueError(f"generator steps {gen.steps} != schedule T {sched.T}")
    if isinstance(backend, HsaBackend) and backend.plan.N < N:
        raise ValueError(f"plan covers {backend.plan.N} chunks, rollout needs {N}")

    rows = layout.chunk_tokens
    kv_k = np.zeros((0, layout.d), dtype=np.float32)
    kv_v = np.zeros((0, layout.d), dtype=np.float32)
    chunks: list[np.ndarray] = []
    stats_per_chunk: list[list[AttnStats]] = []
    for i in range(1, N + 1):
        # level T: pure noise, (1-1)*x + 1*eps
        current = gaussian_field(gen.seed, i, sched.T, rows, layout.d)
        state = RolloutState(kv_k=kv_k, kv_v=kv_v, current=current,
                             chunk_index=i, seed=gen.seed)
        before = len(backend.stats_log)
        for j in range(sched.T, 0, -1):
            state.current = denoise_step(state, j, gen, sched, backend)
        clean = state.current
        chunks.append(clean)
        stats_per_chunk.append(backend.stats_log[before:])
        ck, cv = gen.cache_kv(clean)
        kv_k = np.concatenate([kv_k, ck], axis=0)
        kv_v = np.concatenate([kv_v, cv], axis=0)
    return chunks, stats_per_chunk


def compare_rollouts(reference: list[np.ndarray], candidate: list[np.ndarray],
                     settings_label: str = "") -> DivergenceReport:
    """Per-chunk relative Frobenius error and its running maximum."""
    if len(reference) != len(candidate):
        raise ValueError(f"{len(reference)} reference chunks vs {len(candidate)} candidate")
    errs = []
    for i, (ref, cand) in enumerate(zip(reference, candidate)):
        if ref.shape != cand.shape:
            raise ValueError(f"chunk {i + 1} shape {cand.shape} != reference {ref.shape}")
        denom = float(np.linalg.norm(ref.astype(np.float64)))
        diff = float(np.linalg.norm(cand.astype(np.float64) - ref.astype(np.float64)))
        errs.append(diff / denom if denom > 0 else float(diff > 0))
    cum = []
    best = 0.0
    for e in errs:
        best = max(best, e)
        cum.append(best)
    return DivergenceReport(per_chunk_rel_err=tuple(errs), cumulative=tuple(cum),
                           settings_label=settings_label)


def largest_remainder_split(total: int, weights) -> list[int]:
    """Integer split of ``total`` proportional to ``weights`` (largest remainder).

    Deterministic: ties in the fractional parts go to the lowest index.
    """
    w = np.asarray(weights, dtype=np.float64)
    if total < 0 or w.size == 0 or (w < 0).any() or w.sum() <= 0:
        raise ValueError("need total >= 0 and positive weight mass")
    shares = total * w / w.sum()
    base = np.floor(shares).astype(int)
    short = total - int(base.sum())
    frac = shares - base
    order = np.lexsort((np.arange(w.size), -frac))
    base[order[:short]] += 1
    return [int(b) for b in base]


def matched_budget_settings(layout: ChunkLayout, N: int, first_chunk_sparsity: float
                            ) -> tuple[list[int], list[int]]:
    """Per-chunk row budgets for the two ablation settings, matched in FLOPs.

    Setting A sparsifies only chunk 1 (keeping round((1-s)*blocks) of its
    key blocks) and leaves chunks 2..N dense. Setting B keeps chunk 1 dense
    and removes the same total number of blocks from chunks 2..N,
    distributed proportionally to their context sizes. Row counts and step
    counts match across settings, so equal per-row block totals mean equal
    nominal FLOPs.
    """
    if not 0.0 < first_chunk_sparsity < 1.0:
        raise ValueError(f"first_chunk_sparsity must lie in (0, 1), got {first_chunk_sparsity}")
    if N < 2 or N > layout.N:
        raise ValueError(f"need 2 <= N <= {layout.N}, got {N}")
    full = [layout.k_blocks(i) for i in range(1, N + 1)]
    keep_first = max(1, round_half_up((1.0 - first_chunk_sparsity) * full[0]))
    removed = full[0] - keep_first
    setting_a = [keep_first] + full[1:]
    cuts = largest_remainder_split(removed, full[1:])
    setting_b = [full[0]] + [max(1, fb - c) for fb, c in zip(full[1:], cuts)]
    if sum(setting_b) != sum(setting_a):
        # max(1, ...) never triggers for sane shapes; keep totals honest if it does
        raise ValueError("could not match totals; increase chunk sizes")
    return setting_a, setting_b


_CONFIG_DEFAULTS = {
    "seed": 0,
    "N": 7,
    "T": 4,
    "sigma": None,
    "d": 32,
    "f": 3,
    "n": 128,
    "b_q": 64,
    "b_kv": 64,
    "backend": "dense",
    "plan_path": None,
    "topk_frames": 6,
    "block_budget_mode": "global",
    "budgets": None,
    "logit_gain": 3.0,
}


def normalize_rollout_config(raw: dict) -> dict:
    """Fill defaults into a rollout config mapping and validate it.

    The returned dict is fully resolved: serializing it alongside a report
    is enough to reproduce the run.
    """
    unknown = sorted(set(raw) - set(_CONFIG_DEFAULTS))
    if unknown:
        raise ValueError(f"unknown config keys: {unknown}")
    cfg = {**_CONFIG_DEFAULTS, **raw}
    if cfg["sigma"] is None:
        cfg["sigma"] = [(cfg["T"] - i) / cfg["T"] for i in range(cfg["T"])]
    cfg["sigma"] = [float(s) for s in cfg["sigma"]]
    if len(cfg["sigma"]) != cfg["T"]:
        raise ValueError(f"sigma has {len(cfg['sigma'])} levels for T={cfg['T']}")
    if cfg["backend"] not in BACKEND_KINDS:
        raise ValueError(f"backend must be one of {BACKEND_KINDS}, got {cfg['backend']!r}")
    if cfg["backend"] == "hsa" and not cfg["plan_path"]:
        raise ValueError("hsa backend needs plan_path")
    if cfg["backend"] == "fixed-mask":
        if not cfg["budgets"]:
            raise ValueError("fixed-mask backend needs per-chunk budgets")
        cfg["budgets"] = [int(b) for b in cfg["budgets"]]
        if len(cfg["budgets"]) != cfg["N"]:
            raise ValueError(f"{len(cfg['budgets'])} budgets for N={cfg['N']} chunks")
    return cfg


def build_from_config(cfg: dict, threads: int = 1
                      ) -> tuple[ToyGenerator, NoiseSchedule, object, ChunkLayout]:
    """Construct generator, schedule, and candidate backend from a config."""
    layout = ChunkLayout(f=cfg["f"], n=cfg["n"], b_q=cfg["b_q"], b_kv=cfg["b_kv"],
                         d=cfg["d"], N=cfg["N"])
    sched = NoiseSchedule(tuple(cfg["sigma"]))
    gen = ToyGenerator(seed=cfg["seed"], d=cfg["d"], steps=sched.T,
                       logit_gain=cfg["logit_gain"])
    kind = cfg["backend"]
    if kind == "dense":
        backend = DenseBackend(layout, threads=threads)
    elif kind == "hsa":
        with open(cfg["plan_path"], encoding="utf-8") as fh:
            plan, plan_layout = plan_from_json(fh.read())
        if plan_layout != layout:
            raise ValueError("plan was solved for a different layout than the rollout")
        sel = SelectionConfig(topk_frames=cfg["topk_frames"],
                              block_budget_mode=cfg["block_budget_mode"])
        backend = HsaBackend(layout, plan, sel, threads=threads)
    else:
        backend = FixedMaskBackend(layout, cfg["budgets"], seed=cfg["seed"],
                                   threads=threads)
    return gen, sched, backend, layout


def fit_noise_level(x: np.ndarray, clean: np.ndarray) -> float:
    """Diagnostic: regress x ~ (1-sigma)*clean + sigma*eps for sigma.

    Assuming eps is independent of clean, projecting (clean - x) onto clean
    estimates sigma. Returns a value clipped to [0, 1]; no acceptance logic
    consumes this.
    """
    c = np.asarray(clean, dtype=np.float64).ravel()
    xv = np.asarray(x, dtype=np.float64).ravel()
    if c.shape != xv.shape:
        raise ValueError("shape mismatch")
    denom = float(c @ c)
    if denom == 0.0:
        raise ValueError("clean reference is all zeros")
    return float(np.clip((c - xv) @ c / denom, 0.0, 1.0))
