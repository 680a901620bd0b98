"""Command-line entry point: ``evflow {synth,encode,train,eval}``.

Configuration resolves as profile defaults, then ``--config`` JSON, then
individual flags. Exit codes: 0 success, 1 validation error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from typing import Optional, Sequence

from evflow import pipeline
from evflow.events import ValidationError
from evflow.network import ConfigError
from evflow.pipeline import PROFILES, RunConfig, TrainingError
from evflow.serialization import FormatError

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2


def _common_parser(suppress: bool = False) -> argparse.ArgumentParser:
    # the subcommand copy must not reset values given before the subcommand
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS if suppress else None)
    g = p.add_argument_group("run configuration")
    g.add_argument("--config", help="JSON file with RunConfig overrides")
    g.add_argument("--profile", choices=sorted(PROFILES), default=argparse.SUPPRESS if suppress else "paper")
    g.add_argument("--seed", type=int)
    g.add_argument("--d", type=int, dest="D", help="time depth (even)")
    g.add_argument("--lambda", type=float, dest="lam", help="smoothness weight")
    g.add_argument("--rho-eps", type=float)
    g.add_argument("--rho-q", type=float)
    g.add_argument("--loss-scales", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch", type=int)
    g.add_argument("--base-channels", type=int)
    g.add_argument("--crop", type=int, nargs=2, metavar=("H", "W"))
    g.add_argument("--max-iters", type=int)
    g.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evflow", description=__doc__.splitlines()[0], parents=[_common_parser()])
    common = _common_parser(suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic event dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--pattern", choices=["translating-checker", "translating-gradient"])
    s.add_argument("--velocity", type=float, nargs=2, metavar=("VX", "VY"), help="pixels per second")
    s.add_argument("--threshold", type=float)
    s.add_argument("--duration", type=float)
    s.add_argument("--frame-rate", type=float)
    s.add_argument("--sensor", type=int, nargs=2, metavar=("H", "W"), dest="sensor_size")

    e = sub.add_parser("encode", parents=[common], help="write one voxel grid per window")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--legacy", action="store_true", help="count/latest-timestamp 4-channel image instead")

    t = sub.add_parser("train", parents=[common], help="self-supervised training")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--resume", help="checkpoint directory to continue from")

    v = sub.add_parser("eval", parents=[common], help="masked AEE against ground truth")
    v.add_argument("--data", required=True)
    v.add_argument("--ckpt", help="checkpoint directory; omitted means the seed-initialized network")
    v.add_argument("--out", required=True)
    v.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = PROFILES[args.profile]
    if args.config:
        cfg = pipeline.merge_config(cfg, pipeline.load_config_file(args.config))
    top = {k: getattr(args, k) for k in ("D", "seed", "lr", "epochs", "batch", "base_channels", "max_iters")}
    top = {k: v for k, v in top.items() if v is not None}
    if args.crop is not None:
        top["crop"] = tuple(args.crop)
    loss = {k: v for k, v in (("lam", args.lam), ("rho_eps", args.rho_eps), ("rho_q", args.rho_q),
                               ("scales", args.loss_scales)) if v is not None}
    if loss:
        top["loss"] = loss
    synth = {}
    for key in ("pattern", "threshold", "duration", "frame_rate"):
        if getattr(args, key, None) is not None:
            synth[key] = getattr(args, key)
    for key in ("velocity", "sensor_size"):
        if getattr(args, key, None) is not None:
            synth[key] = tuple(getattr(args, key))
    if synth:
        top["synth"] = synth
    cfg = pipeline.merge_config(cfg, top)
    cfg.validate()
    return cfg


def run(args: argparse.Namespace) -> dict:
    cfg = resolve_config(args)
    if args.command == "synth":
        summary = pipeline.cmd_synth(cfg, args.out)
        return {"out": args.out, "num_events": summary["num_events"], "num_windows": len(summary["windows"])}
    if args.command == "encode":
        written = pipeline.cmd_encode(cfg, args.data, args.out, legacy=args.legacy)
        return {"out": args.out, "files": len(written)}
    if args.command == "train":
        result = pipeline.cmd_train(cfg, args.data, args.out, resume=args.resume)
        totals = result.totals
        return {"out": args.out, "iterations": len(totals), "first_total": totals[0] if totals else None,
                "last_total": totals[-1] if totals else None}
    report = pipeline.cmd_eval(cfg, args.data, args.ckpt, args.out, oracle=args.oracle)
    return {"out": args.out, "aee": report.aee, "outlier_pct": report.outlier_pct, "n_active": report.n_active,
            "skipped_empty": report.skipped_empty}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = run(args)
    except (FormatError, OSError) as exc:
        print(f"evflow: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValidationError, ConfigError, TrainingError, ValueError, KeyError) as exc:
        print(f"evflow: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
