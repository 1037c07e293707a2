"""``retvqa`` command line: gen-data, train, eval, ablate, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .config import WORKDIR_ENV, load_config
from .metrics import format_report
from .synthworld import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_MISSING = 0, 2, 3

TRAIN_STAGES = ("pretrain-rel", "finetune-rel", "train-qa", "train-baselines")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path override, e.g. generator.d=64 (repeatable; wins over --config)")
    common.add_argument("--workdir", help=f"output directory (default: ${WORKDIR_ENV} or ./retvqa-work)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="retvqa", description="Retrieval-based multi-image QA pipeline")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate scenes, features and the QA dataset")

    t = sub.add_parser("train", parents=[common], help="run a training stage")
    t.add_argument("stage", choices=TRAIN_STAGES)
    t.add_argument("--variant", default="mibart", choices=sorted(pipeline.QA_VARIANTS),
                   help="QA model for train-qa")
    t.add_argument("--resume", action="store_true", help="continue train-qa from its checkpoint")

    e = sub.add_parser("eval", parents=[common], help="evaluate a method")
    e.add_argument("mode", choices=("oracle", "retrieved"))
    e.add_argument("--method", default="mibart", choices=pipeline.METHODS)
    e.add_argument("--split", default="test", choices=("val", "test"))

    a = sub.add_parser("ablate", parents=[common], help="run an ablation sweep")
    a.add_argument("sweep", choices=sorted(pipeline.ABLATIONS))

    sub.add_parser("report", parents=[common], help="collect results into report.md")
    return p


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.overrides, args.workdir)
    if args.command == "gen-data":
        _print(pipeline.gen_data(cfg))
    elif args.command == "train":
        if args.stage == "pretrain-rel":
            _print(pipeline.train_pretrain_rel(cfg))
        elif args.stage == "finetune-rel":
            _print(pipeline.train_finetune_rel(cfg))
        elif args.stage == "train-qa":
            _print(pipeline.train_qa(cfg, args.variant, args.resume))
        else:
            _print(pipeline.train_baselines(cfg))
    elif args.command == "eval":
        report = pipeline.run_eval(cfg, args.mode, args.method, args.split)
        print(format_report(report, f"{args.method} ({args.mode}, {args.split})"))
    elif args.command == "ablate":
        _print(pipeline.ABLATIONS[args.sweep](cfg))
    elif args.command == "report":
        print(pipeline.build_report(cfg), end="")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return run(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.MissingPrerequisite as e:
        print(f"missing prerequisite: {e}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
