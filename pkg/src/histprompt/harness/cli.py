"""Command-line entry point: simulate, ablate, bench, stats, inspect-memory.

Exit codes: 0 success, 2 configuration error, 3 runtime, dimension or snapshot error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .. import __version__
from ..errors import HistPromptError
from ..geometry import mask_to_pbm
from ..kernels import BACKEND
from ..memory import ReadoutConfig, load_snapshot, readout_attention, save_snapshot
from .ablate import ABLATION_COLUMNS, ablate, load_matrix
from .bench import BENCH_SIZES, bench_readout
from .config import dump_config, load_config
from .stats import model_stats
from .tracker import CSV_COLUMNS, run_sequence
from .weights import build_weights, load_weights
from .world import SyntheticWorld



def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


def cmd_simulate(args) -> int:
    cfg, world_cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    weights = build_weights(cfg)
    if args.weights:
        load_weights(args.weights, weights)
    result = run_sequence(SyntheticWorld(world_cfg), cfg, weights, keep_masks=True)

    _write_csv(out / "frames.csv", CSV_COLUMNS, result.rows)
    summary = {"record": "sequence", "seed": world_cfg.seed, "backend": BACKEND,
               **result.metrics.summary(),
               "memory_frames": [int(f) for f in result.state.memory.frames]}
    with open(out / "summary.jsonl", "w") as fh:
        fh.write(json.dumps(summary) + "\n")
        for t, mask in sorted(result.masks.items()):
            fh.write(json.dumps({"record": "memory_update", "frame": t, "mask_cells": int(mask.sum())}) + "\n")
    save_snapshot(result.state.memory, out / "memory.hipm")
    masks = out / "masks"
    masks.mkdir(exist_ok=True)
    for t, mask in result.masks.items():
        (masks / f"frame_{t:05d}.pbm").write_text(mask_to_pbm(mask, f"refined mask, frame {t}"))
    (out / "config.txt").write_text(dump_config(cfg, world_cfg))
    print(f"mean_iou={summary['mean_iou']:.4f} auc={summary['auc']:.4f} "
          f"precision={summary['precision']:.4f} norm_precision={summary['norm_precision']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg, world_cfg = load_config(args.config)
    if args.frames:
        world_cfg = world_cfg.replace(frames=args.frames)
    matrix = load_matrix(args.matrix)
    table = ablate(cfg, world_cfg, matrix, seeds=range(args.seeds), jobs=args.jobs)
    if args.out:
        _write_csv(Path(args.out), ABLATION_COLUMNS, table)
    else:
        writer = csv.DictWriter(sys.stdout, fieldnames=list(ABLATION_COLUMNS), lineterminator="\n")
        writer.writeheader()
        for row in table:
            writer.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in row.items()})
    return 0


def cmd_bench(args) -> int:
    report = bench_readout(args.sizes, queries=args.queries, backends=args.backend or None)
    if args.json:
        print(json.dumps(report, indent=2))
        return 0
    print(f"{'N':>8} {'backend':>8} {'seconds':>9} {'rel_err':>9}")
    for r in report:
        print(f"{r['n']:>8} {r['backend']:>8} {r['seconds']:>9.3f} {r['rel_err']:>9.2e}")
    return 0


def cmd_stats(args) -> int:
    cfg, _ = load_config(args.config)
    print(json.dumps(model_stats(cfg), indent=2))
    return 0


def cmd_inspect(args) -> int:
    bank = load_snapshot(args.snapshot)
    keys, _, ids = bank.snapshot()
    rows = ids == args.frame
    if not rows.any():
        raise HistPromptError(f"frame {args.frame} is not in the snapshot (frames {bank.frames})")
    att = readout_attention(bank, keys[rows][None], ReadoutConfig(args.metric))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"attention_frame_{args.frame}.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["token", "frame_id", *(f"q{j}" for j in range(att.matrix.shape[1]))])
        for i, (fid, row) in enumerate(zip(att.frame_ids, att.matrix)):
            writer.writerow([i, int(fid), *(f"{v:.6g}" for v in row)])
    share = att.per_frame.mean(axis=1)
    with open(out / f"attention_frame_{args.frame}_per_frame.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["frame_id", "mean_weight"])
        for fid, w in zip(att.frames, share):
            writer.writerow([int(fid), f"{w:.6f}"])
    # per stored frame: tokens drawing more than the uniform share of attention
    side = int(round(np.sqrt(bank.tokens_per_frame))) if bank.tokens_per_frame else 0
    uniform = 1.0 / att.matrix.shape[0]
    for fid in att.frames:
        sel = att.frame_ids == fid
        if side * side != bank.tokens_per_frame or sel.sum() != bank.tokens_per_frame:
            continue  # background-free frames have no full grid to draw
        hot = att.matrix[sel].mean(axis=1) > uniform
        (out / f"attention_frame_{args.frame}_from_{int(fid)}.pbm").write_text(
            mask_to_pbm(hot.reshape(side, side), f"queries of frame {args.frame} on memory frame {int(fid)}"))
    for fid, w in zip(att.frames, share):
        print(f"frame {int(fid):>5}: {w:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="histprompt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="track one synthetic sequence")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--weights", help="HIPW weight snapshot to load over the configured weights")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ablate", help="run a toggle matrix over the seeded suite")
    p.add_argument("--config", required=True)
    p.add_argument("--matrix", required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--frames", type=int, default=0, help="override the world's frame count")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="time the readout kernels")
    p.add_argument("--sizes", type=int, nargs="+", default=list(BENCH_SIZES))
    p.add_argument("--queries", type=int, default=576)
    p.add_argument("--backend", action="append", choices=("cython", "numpy"))
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("stats", help="parameter and multiply-accumulate counts")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("inspect-memory", help="dump attention of one stored frame over the bank")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--metric", choices=("neg_l2", "dot"), default="neg_l2")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except HistPromptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
