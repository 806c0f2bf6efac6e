"""Command-line front end.

Subcommands:
  plan       solve a sparsity schedule and write canonical plan JSON
  bench      time dense vs block-sparse attention over a density sweep (CSV)
  rollout    dense-reference vs candidate-backend rollout divergence (CSV)
  mask-dump  export a two-stage selection mask as PGM (+ trace JSON)

Every CSV embeds the fully resolved config as a leading `# config:` comment
line so any row is reproducible from the file alone. Exit codes: 0 success,
2 usage error, 3 numeric failure (a NaN anywhere in a pipeline is fatal,
never written to a report).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import statistics
import sys
import time

import numpy as np

from chunkattn.attention import BlockMask, ChunkLayout, block_sparse_attention, dense_attention
from chunkattn.planner import allocate, chunk_block_budget, plan_to_json
from chunkattn.reports import canonical_json, config_hash, plain
from chunkattn.rollout import (
    DenseBackend,
    build_from_config,
    compare_rollouts,
    normalize_rollout_config,
    rollout,
)
from chunkattn.selection import (
    SelectionConfig,
    build_mask,
    compress,
    frame_scores,
    select_blocks,
    select_frames,
    selection_trace,
)


class NumericError(RuntimeError):
    """A NaN surfaced somewhere in a pipeline."""


def resolve_threads(flag_value: int | None) -> int:
    """--threads if given, else LF_THREADS, else available parallelism."""
    if flag_value is not None:
        return max(1, flag_value)
    env = os.environ.get("LF_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"LF_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def check_no_nan(what: str, *arrays) -> None:
    for a in arrays:
        if np.isnan(np.asarray(a, dtype=np.float64)).any():
            raise NumericError(f"NaN detected in {what}")


def write_csv(path: str, header: list[str], rows: list[list], config: dict) -> None:
    """CSV with a one-line `# config:` comment, then an RFC-4180 body."""
    line = json.dumps(plain(config), sort_keys=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config: {line}\r\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _median_time(fn, repeats: int) -> float:
    """Median wall time over ``repeats`` runs after one discarded warmup."""
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def _bench_mask(n_q: int, n_k: int, density: float, seed: int) -> BlockMask:
    """Random mask with round-half-up(density * n_k) active blocks per row."""
    per_row = min(n_k, max(1, int(np.floor(density * n_k + 0.5))))
    rng = np.random.default_rng([seed, 23])
    bits = np.zeros((n_q, n_k), dtype=bool)
    for r in range(n_q):
        bits[r, rng.choice(n_k, size=per_row, replace=False)] = True
    return BlockMask(bits)


def cmd_plan(args) -> int:
    layout = ChunkLayout(f=args.frames, n=args.tokens, b_q=args.block,
                         b_kv=args.kv_block or args.block, d=args.dim, N=args.chunks)
    plan = allocate(args.starget, args.sbase, args.chunks, args.steps, layout,
                    first_chunk_dense=not args.no_first_dense,
                    redistribute=args.redistribute)
    check_no_nan("plan", list(plan.s), [plan.beta], list(plan.alpha),
                 [plan.achieved_flops_ratio])
    out = args.out or "plan.json"
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(plan_to_json(plan, layout))

    print(f"{'chunk':>5} {'alpha':>10} {'s_i':>10} {'budget':>7} clamped")
    for i in range(1, plan.N + 1):
        print(f"{i:>5} {plan.alpha[i - 1]:>10.6f} {plan.s[i - 1]:>10.6f} "
              f"{plan.budgets[i - 1]:>7} {'yes' if plan.clamped[i - 1] else 'no'}")
    print(f"beta={plan.beta!r}")
    print(f"achieved_flops_ratio={plan.achieved_flops_ratio!r} "
          f"target={1.0 - plan.s_target!r}")
    print(f"wrote {out}")
    return 0


def cmd_bench(args) -> int:
    if args.repeats < 3:
        raise ValueError(f"--repeats must be >= 3, got {args.repeats}")
    densities = [float(x) for x in args.densities.split(",") if x]
    if any(not 0.0 < x <= 1.0 for x in densities):
        raise ValueError(f"densities must lie in (0, 1]: {densities}")
    if 1.0 not in densities:
        densities.insert(0, 1.0)  # baseline row

    threads = resolve_threads(args.threads)
    b_kv = args.kv_block or args.block
    layout = ChunkLayout(f=1, n=args.seq, b_q=args.block, b_kv=b_kv, d=args.dim, N=1)
    rng = np.random.default_rng([args.seed, 17])
    q = rng.standard_normal((args.seq, args.dim)).astype(np.float32)
    k = rng.standard_normal((args.seq, args.dim)).astype(np.float32)
    v = rng.standard_normal((args.seq, args.dim)).astype(np.float32)

    dense_out = dense_attention(q, k, v, threads=threads)
    check_no_nan("dense attention output", dense_out)
    t_dense = _median_time(lambda: dense_attention(q, k, v, threads=threads),
                           args.repeats)

    config = {"command": "bench", "seq": args.seq, "d": args.dim, "b_q": args.block,
              "b_kv": b_kv, "densities": densities, "repeats": args.repeats,
              "seed": args.seed, "threads": threads}
    chash = config_hash(config)
    n_q = layout.q_blocks
    n_k = layout.k_blocks(1)

    rows = []
    for density in densities:
        mask = _bench_mask(n_q, n_k, density, args.seed)
        out, stats = block_sparse_attention(q, k, v, mask, layout, threads=threads)
        check_no_nan(f"sparse attention output at density {density}", out)
        t_sparse = _median_time(
            lambda: block_sparse_attention(q, k, v, mask, layout, threads=threads),
            args.repeats)
        err = float(np.max(np.abs(out.astype(np.float64) - dense_out.astype(np.float64))))
        rows.append([
            chash, args.seq, args.dim, args.block, b_kv,
            repr(density), repr(1.0 - stats.active_tiles / stats.total_tiles),
            stats.active_tiles, stats.total_tiles, stats.flop_estimate,
            repr(t_dense), repr(t_sparse), repr(t_dense / t_sparse), repr(err),
        ])
        print(f"density {density}: active {stats.active_tiles}/{stats.total_tiles}, "
              f"speedup {t_dense / t_sparse:.2f}x, max_abs_err {err:.2e}")

    out_path = args.out or "bench.csv"
    write_csv(out_path, ["config_hash", "seq", "d", "b_q", "b_kv", "density",
                         "sparsity", "active_tiles", "total_tiles", "flops",
                         "wall_time_dense", "wall_time_sparse", "speedup",
                         "max_abs_err_vs_dense"], rows, config)
    print(f"wrote {out_path}")
    return 0


def cmd_rollout(args) -> int:
    with open(args.config, encoding="utf-8") as fh:
        raw = json.load(fh)
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = normalize_rollout_config(raw)
    threads = resolve_threads(args.threads)

    gen, sched, candidate, layout = build_from_config(cfg, threads=threads)
    reference = DenseBackend(layout, threads=threads)
    ref_chunks, _ = rollout(cfg["N"], gen, sched, reference, layout)
    cand_chunks, cand_stats = rollout(cfg["N"], gen, sched, candidate, layout)
    check_no_nan("reference rollout", *ref_chunks)
    check_no_nan("candidate rollout", *cand_chunks)
    report = compare_rollouts(ref_chunks, cand_chunks, settings_label=cfg["backend"])

    config = {"command": "rollout", **cfg, "threads": threads}
    chash = config_hash(config)
    rows = []
    for i, (err, cum) in enumerate(zip(report.per_chunk_rel_err, report.cumulative), start=1):
        steps = cand_stats[i - 1]
        rows.append([i, f"{err:.6g}", f"{cum:.6g}",
                     sum(s.active_tiles for s in steps),
                     sum(s.flop_estimate for s in steps), chash])
        print(f"chunk {i}: rel_err {err:.6g} cumulative {cum:.6g}")

    out_path = args.out or "divergence.csv"
    write_csv(out_path, ["chunk_index", "rel_err", "cumulative", "active_tiles",
                         "flops", "config_hash"], rows, config)
    print(f"wrote {out_path}")

    if args.dump_masks:
        os.makedirs(args.dump_masks, exist_ok=True)
        T = sched.T
        for idx, mask in enumerate(candidate.mask_log):
            chunk = idx // T + 1
            step = T - idx % T  # steps run T..1
            mask.to_pgm(os.path.join(args.dump_masks,
                                     f"mask_chunk{chunk:02d}_step{step}.pgm"))
        print(f"wrote {len(candidate.mask_log)} mask PGMs to {args.dump_masks}")
    return 0


def cmd_mask_dump(args) -> int:
    layout = ChunkLayout(f=args.frames, n=args.tokens, b_q=args.block,
                         b_kv=args.kv_block or args.block, d=args.dim, N=args.chunks)
    i = args.chunk
    if not 0.0 <= args.sparsity < 1.0:
        raise ValueError(f"--sparsity must lie in [0, 1), got {args.sparsity}")
    cfg = SelectionConfig(topk_frames=args.topk, block_budget_mode=args.mode)
    rng = np.random.default_rng([args.seed, 29])
    q = rng.standard_normal((layout.chunk_tokens, layout.d)).astype(np.float32)
    k = rng.standard_normal((layout.context_tokens(i), layout.d)).astype(np.float32)

    views = compress(q, k, i, layout)
    current_blocks = layout.f * layout.frame_kv_blocks
    total_budget = current_blocks if i == 1 else chunk_block_budget(args.sparsity, i, layout)
    past_budget = max(0, total_budget - current_blocks)
    selections = []
    score_rows = []
    for r in range(views.q_block.shape[0]):
        p = frame_scores(views, r)
        fset = select_frames(p, cfg, i, layout)
        selections.append(select_blocks(views, r, fset, past_budget, cfg))
        score_rows.append(p)
    mask = build_mask(selections, i, layout)

    out_path = args.out or "mask.pgm"
    mask.to_pgm(out_path)
    density = mask.popcount() / (mask.n_q * mask.n_k)
    print(f"mask {mask.n_q}x{mask.n_k}, active {mask.popcount()} "
          f"({density:.4f} density), wrote {out_path}")

    if args.trace:
        payload = {
            "config": {"command": "mask-dump", "f": layout.f, "n": layout.n,
                       "b_q": layout.b_q, "b_kv": layout.b_kv, "d": layout.d,
                       "N": layout.N, "chunk": i, "sparsity": args.sparsity,
                       "topk_frames": args.topk, "mode": args.mode,
                       "seed": args.seed},
            "rows": selection_trace(selections, score_rows),
        }
        with open(args.trace, "w", encoding="utf-8") as fh:
            fh.write(canonical_json(payload))
        print(f"wrote {args.trace}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="RNG seed (default 0; for rollout, overrides the config)")
    common.add_argument("--threads", type=int, default=None,
                        help="kernel threads (default: LF_THREADS or CPU count)")
    common.add_argument("--out", type=str, default=None, help="output file path")

    parser = argparse.ArgumentParser(prog="chunkattn",
                                     description="block-sparse attention planning and benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", parents=[common], help="solve a sparsity schedule")
    p.add_argument("--starget", type=float, default=0.9)
    p.add_argument("--sbase", type=float, default=0.98)
    p.add_argument("--chunks", type=int, default=7)
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--frames", type=int, default=3, help="latent frames per chunk")
    p.add_argument("--tokens", type=int, default=1536, help="tokens per latent frame")
    p.add_argument("--block", type=int, default=64)
    p.add_argument("--kv-block", type=int, default=None)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--no-first-dense", action="store_true",
                   help="let the solver cover chunk 1 instead of pinning it dense")
    p.add_argument("--redistribute", action="store_true",
                   help="re-solve beta over unclamped chunks when clamping triggers")
    p.set_defaults(func=cmd_plan)

    b = sub.add_parser("bench", parents=[common], help="kernel timing sweep")
    b.add_argument("--seq", type=int, default=8192)
    b.add_argument("--dim", type=int, default=64)
    b.add_argument("--block", type=int, default=64)
    b.add_argument("--kv-block", type=int, default=None)
    b.add_argument("--densities", type=str, default="1.0,0.5,0.25,0.1",
                   help="comma list; 1.0 is always included as the baseline")
    b.add_argument("--repeats", type=int, default=5)
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("rollout", parents=[common], help="divergence vs dense reference")
    r.add_argument("--config", type=str, required=True, help="rollout config JSON")
    r.add_argument("--dump-masks", type=str, default=None,
                   help="directory for per-(chunk, step) mask PGMs")
    r.set_defaults(func=cmd_rollout)

    m = sub.add_parser("mask-dump", parents=[common], help="export a selection mask")
    m.add_argument("--frames", type=int, default=3)
    m.add_argument("--tokens", type=int, default=128)
    m.add_argument("--block", type=int, default=64)
    m.add_argument("--kv-block", type=int, default=None)
    m.add_argument("--dim", type=int, default=32)
    m.add_argument("--chunks", type=int, default=7)
    m.add_argument("--chunk", type=int, default=7, help="chunk index to dump")
    m.add_argument("--sparsity", type=float, default=0.9)
    m.add_argument("--topk", type=int, default=6)
    m.add_argument("--mode", type=str, default="global", choices=["global", "per-frame"])
    m.add_argument("--trace", type=str, default=None, help="selection trace JSON path")
    m.set_defaults(func=cmd_mask_dump)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command != "rollout" and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError, KeyError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
