"""Command line entry point: ``mdpr train|eval|visualize``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import load_config
from .engine import Checkpoint, run_evaluation, run_training
from .visualize import visualize_directory


def _train(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    resume = Checkpoint.load(args.resume) if args.resume else None
    ckpt = run_training(cfg, resume=resume)
    out = cfg.resolved_output_dir()
    print(f"trained {ckpt.epoch} epochs; checkpoint at {out / 'checkpoint.pt'}")
    return 0


def _eval(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    ckpt = Checkpoint.load(args.checkpoint)
    out = Path(args.out) if args.out else cfg.resolved_output_dir()
    metrics = run_evaluation(ckpt, cfg.dataset, out)
    print(json.dumps(metrics.as_dict(), indent=2))
    return 0


def _visualize(args: argparse.Namespace) -> int:
    model = Checkpoint.load(args.checkpoint).build_model()
    paths = visualize_directory(model, args.images, args.out)
    print(f"wrote {len(paths)} files to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdpr", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a YAML config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the config's dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="directory for rankings.csv and eval_metrics.json")
    p.set_defaults(func=_eval)

    p = sub.add_parser("visualize", help="export attention heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_visualize)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
