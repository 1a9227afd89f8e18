"""``crld`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from crld import config as cfgmod
from crld import harness
from crld.checkpoint import CheckpointError
from crld.data import DatasetFormatError

GRID_COMMANDS = ("ablate", "sweep-tau", "sweep-strength", "view-mode")
RESUMABLE = ("pretrain", "distill")


def build_parser():
    p = argparse.ArgumentParser(prog="crld", description="Consistency-regularised logit distillation runs.")
    p.add_argument("command", choices=sorted(harness.COMMANDS))
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--out", help="override run.out")
    p.add_argument("--resume", action="store_true", help="continue pretrain/distill from its last epoch")
    p.add_argument("--parallel", action="store_true", help="run grid points in separate processes")
    p.add_argument("--stop-after", type=int, metavar="N",
                   help="stop pretrain/distill after N epochs (leaves a resumable run)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = cfgmod.load(args.config, validate=False)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = cfg.with_out(args.out)
    cfg.validate()

    fn = harness.COMMANDS[args.command]
    kwargs = {}
    if args.command in RESUMABLE:
        kwargs = {"resume": args.resume, "stop_after": args.stop_after}
    elif args.resume or args.stop_after is not None:
        raise cfgmod.ConfigError(f"--resume/--stop-after apply only to {', '.join(RESUMABLE)}")
    if args.command in GRID_COMMANDS:
        kwargs["parallel"] = args.parallel
    return fn(cfg, **kwargs)


def main(argv=None):
    try:
        result = run(argv)
    except (cfgmod.ConfigError, harness.HarnessError, CheckpointError, DatasetFormatError, OSError) as exc:
        print(f"crld: error: {exc}", file=sys.stderr)
        return 2
    json.dump(result, sys.stdout, indent=1, default=str)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
