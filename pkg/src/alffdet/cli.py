"""Command-line entry point: synth, train, eval, heatmap, gradcheck."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import gradcheck as gc
from .geometry import GridSpec, render_heatmap
from .pgmio import write_pgm
from .synth import SynthError, make_split, read_annotations, read_meta
from .train import (CheckpointError, RunConfig, TrainingError, evaluate,
                    load_checkpoint, parse_config, train)


def _load_run_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        with open(args.config) as f:
            cfg = parse_config(f.read(), cfg)
    for name in ("dataset", "image_size", "epochs", "batch_size", "lr",
                 "weight_decay", "alpha", "mode", "enable_alff", "enable_ncdfl",
                 "seed", "checkpoint", "loss_csv", "score_thr", "iou_thr"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    env_seed = os.environ.get("ALFF_SEED")
    if env_seed is not None:
        cfg.seed = int(env_seed)
    return cfg


def _bool_flag(v: str) -> bool:
    if v.lower() not in ("true", "false"):
        raise argparse.ArgumentTypeError(f"expected true/false, got {v!r}")
    return v.lower() == "true"


def cmd_synth(args) -> int:
    make_split(args.profile, args.n, args.seed, args.out,
               image_size=args.image_size)
    print(f"wrote {args.n} {args.profile}-density images to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    train(cfg, resume=args.resume)
    print(f"checkpoint: {cfg.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    params, _, _, _ = load_checkpoint(args.checkpoint_path)
    ap50, ap75, ap5095 = evaluate(params, args.dataset_path, cfg.image_size,
                                  cfg.score_thr, cfg.iou_thr)
    header = f"{'AP50':>8} {'AP75':>8} {'AP50-95':>8}"
    row = f"{ap50:8.4f} {ap75:8.4f} {ap5095:8.4f}"
    print(header)
    print(row)
    if args.out_csv:
        with open(args.out_csv, "w") as f:
            f.write("ap50,ap75,ap50_95\n")
            f.write(f"{ap50:.6f},{ap75:.6f},{ap5095:.6f}\n")
    return 0


def cmd_heatmap(args) -> int:
    meta = read_meta(os.path.join(args.dataset, "meta.csv"))
    ids = {row[0] for row in meta}
    if args.image_id not in ids:
        raise SynthError(f"unknown image id {args.image_id} in {args.dataset}")
    ann = {r.image_id: r.boxes for r in
           read_annotations(os.path.join(args.dataset, "annotations.csv"))}
    spec = GridSpec(args.image_size, args.image_size, 8)
    target = render_heatmap(ann.get(args.image_id, []), spec)
    write_pgm(args.out, target.grid)
    print(f"wrote {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gc.run_all(args.seed, corrupt=args.corrupt)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:<16} max_rel_err {r.max_rel_err:.3e} (tol {r.tol:g})")
        ok &= r.passed
    if not ok:
        failed = ", ".join(r.name for r in results if not r.passed)
        print(f"gradient check failed: {failed}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="alffdet")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--profile", choices=("low", "high"), required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=160, dest="image_size")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train the detector")
    p.add_argument("--config")
    p.add_argument("--dataset")
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--alpha", type=float)
    p.add_argument("--mode", choices=("inflate", "deflate"))
    p.add_argument("--enable-alff", type=_bool_flag, dest="enable_alff")
    p.add_argument("--enable-ncdfl", type=_bool_flag, dest="enable_ncdfl")
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--loss-csv", dest="loss_csv")
    p.add_argument("--resume")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("checkpoint_path")
    p.add_argument("dataset_path")
    p.add_argument("--config")
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--score-thr", type=float, dest="score_thr")
    p.add_argument("--iou-thr", type=float, dest="iou_thr")
    p.add_argument("--out-csv", dest="out_csv")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("heatmap", help="dump a ground-truth target heatmap")
    p.add_argument("dataset")
    p.add_argument("image_id", type=int)
    p.add_argument("out")
    p.add_argument("--image-size", type=int, default=160, dest="image_size")
    p.set_defaults(fn=cmd_heatmap)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", help="test hook: spoil one unit's gradient")
    p.set_defaults(fn=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (SynthError, TrainingError, CheckpointError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
