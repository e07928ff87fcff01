"""Command-line entry point: ``lteranging <subcommand> [options]``."""

from __future__ import annotations

import argparse
import sys

from . import pipeline

SUBCOMMANDS = ("simulate", "receive", "make-dataset", "train", "evaluate", "pipeline")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON; built-in defaults if omitted")
    common.add_argument("--seed", type=int, help="seed for scenario, split and initialization")
    common.add_argument("--out", default="run", help="working directory (default: run)")
    common.add_argument("--align", choices=("toa", "peak"), help="CIR alignment mode")
    common.add_argument("--eq1-scale", choices=("literal", "dimensional"),
                        help="TOA update scaling")
    common.add_argument("--variant", choices=("proposed", "baseline", "complex"))
    common.add_argument("--optimizer", choices=("adam", "sgd-decay"))
    common.add_argument("--dropout", type=float, help="dropout rate before the dense head")
    common.add_argument("--epochs", type=int)
    common.add_argument("-v", "--verbose", action="store_true", help="print per-epoch losses")

    parser = argparse.ArgumentParser(prog="lteranging", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def _experiment(args) -> pipeline.ExperimentConfig:
    cfg = (pipeline.ExperimentConfig.load(args.config) if args.config
           else pipeline.ExperimentConfig())
    cfg = cfg.with_seed(args.seed)
    if args.align:
        cfg.receiver["align"] = args.align
    if args.eq1_scale:
        cfg.receiver["eq1_mode"] = args.eq1_scale
    if args.optimizer:
        cfg.train["optimizer"] = args.optimizer
        if args.optimizer == "sgd-decay":
            cfg.train.setdefault("learning_rate", 0.1)
    if args.epochs is not None:
        cfg.train["epochs"] = args.epochs
    if args.dropout is not None:
        cfg.model["dropout_rate"] = args.dropout
    if args.variant and args.command in ("evaluate", "pipeline"):
        cfg.compare = [args.variant]
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    progress = None
    if args.verbose:
        def progress(epoch, tr, va):
            print(f"  epoch {epoch}: train {tr:.4f} m, val {va:.4f} m", file=sys.stderr)
    try:
        cfg = _experiment(args)
        cmd = args.command
        if cmd == "simulate":
            lines = [pipeline.simulate(cfg, args.out)]
        elif cmd == "receive":
            lines = [pipeline.receive(cfg, args.out)]
        elif cmd == "make-dataset":
            lines = [pipeline.make_dataset(cfg, args.out)]
        elif cmd == "train":
            lines = [pipeline.train(cfg, args.out, args.variant, progress)]
        elif cmd == "evaluate":
            lines = [pipeline.evaluate(cfg, args.out)]
        else:
            lines = pipeline.pipeline(cfg, args.out, progress)
    except (pipeline.StageError, OSError, ValueError, KeyError, RuntimeError) as exc:
        stage = getattr(exc, "stage", args.command)
        msg = str(exc)
        if not msg.startswith(stage + ":"):
            msg = f"{stage}: {msg}"
        print(f"error: {msg}", file=sys.stderr)
        return 1
    for line in lines:
        print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
