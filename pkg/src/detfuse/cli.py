"""Command-line entry point.

    detfuse <subcommand> --config run.cfg [--set key=value ...] [options]

Subcommands cover the whole workflow: simulate, calibrate, featurize,
train, rerank, eval, bound, analyze. Exit codes: 0 success, 1 usage
error, 2 data/validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys

from .config import RunConfig
from .errors import DataError, NumericError
from . import pipeline

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

RERANK_MODES = "learned, naive-i, naive-ii, naive-iii, single:<detector>"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # exit 1, not argparse's 2
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="detfuse", description=__doc__.split("\n\n")[1])
    sub = parser.add_subparsers(dest="subcommand", metavar="subcommand")

    def common(p):
        p.add_argument("--config", required=True, help="key=value run configuration file")
        p.add_argument(
            "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
            help="override one configuration key (repeatable)",
        )

    common(sub.add_parser("simulate", help="generate GT, detections and proposals"))
    common(sub.add_parser("calibrate", help="fit per-detector/class sigmoid calibration"))

    p = sub.add_parser("featurize", help="dump context feature vectors")
    common(p)
    p.add_argument("--fold", action="append", dest="folds", choices=["train", "val", "trainval", "test"],
                   help="fold(s) to featurize (default: trainval and test)")

    p = sub.add_parser("train", help="train per-class ranking models")
    common(p)
    p.add_argument("--single", metavar="DETECTOR", help="train on one detector only")

    p = sub.add_parser("rerank", help="produce a merged, re-ranked detection list")
    common(p)
    p.add_argument("--mode", required=True, help=f"one of: {RERANK_MODES}")
    p.add_argument("--emit-suppressed", action="store_true",
                   help="keep suppressed detections in the output with a flag column")

    p = sub.add_parser("eval", help="VOC evaluation of a ranked list or raw detections")
    common(p)
    p.add_argument("--ranked", help="ranked detection file to evaluate")
    p.add_argument("--mode", help=f"evaluate the output of a rerank mode ({RERANK_MODES})")
    p.add_argument("--detections", help="raw detection file to evaluate as a baseline")
    p.add_argument("--detector", help="restrict --detections to one detector")
    p.add_argument("--use-calibrated", action="store_true",
                   help="rank --detections by calibrated instead of raw score")
    p.add_argument("--fold", default="test", choices=["train", "val", "trainval", "test"])
    p.add_argument("--name", help="report name (default: derived from the input)")

    p = sub.add_parser("bound", help="maximal achievable AP per detector and combined")
    common(p)
    p.add_argument("--fold", default="test", choices=["train", "val", "trainval", "test"])
    p.add_argument("--matching", default="exact", choices=["exact", "greedy"])

    p = sub.add_parser("analyze", help="FP taxonomy, PR curves, feature importance")
    common(p)
    p.add_argument("--mode", help=f"analyze the output of a rerank mode ({RERANK_MODES})")
    p.add_argument("--ranked", help="ranked detection file to analyze")
    p.add_argument("--fold", default="test", choices=["train", "val", "trainval", "test"])
    p.add_argument("--no-taxonomy", action="store_true")
    p.add_argument("--no-importance", action="store_true")
    p.add_argument("--no-pr", action="store_true")
    return parser


def _dispatch(args: argparse.Namespace) -> None:
    cfg = RunConfig.load(args.config, args.overrides)
    if args.subcommand == "simulate":
        outputs = pipeline.run_simulate(cfg)
        print(f"simulate: wrote {len(outputs)} files under {cfg.workspace}")
    elif args.subcommand == "calibrate":
        path = pipeline.run_calibrate(cfg)
        print(f"calibrate: wrote {path}")
    elif args.subcommand == "featurize":
        outputs = pipeline.run_featurize(cfg, args.folds)
        for out in outputs:
            print(f"featurize: wrote {out}")
    elif args.subcommand == "train":
        out_dir = pipeline.run_train(cfg, single=args.single)
        print(f"train: wrote models under {out_dir}")
    elif args.subcommand == "rerank":
        path = pipeline.run_rerank(cfg, args.mode, args.emit_suppressed)
        print(f"rerank: wrote {path}")
    elif args.subcommand == "eval":
        pipeline.run_eval(
            cfg,
            ranked_path=args.ranked,
            mode=args.mode,
            detections_path=args.detections,
            detector=args.detector,
            use_calibrated=args.use_calibrated,
            fold=args.fold,
            name=args.name,
        )
    elif args.subcommand == "bound":
        pipeline.run_bound(cfg, fold=args.fold, matching=args.matching)
    elif args.subcommand == "analyze":
        outputs = pipeline.run_analyze(
            cfg,
            mode=args.mode,
            ranked_path=args.ranked,
            fold=args.fold,
            taxonomy=not args.no_taxonomy,
            importance=not args.no_importance,
            curves=not args.no_pr,
        )
        for out in outputs:
            print(f"analyze: wrote {out}")
    else:
        raise _UsageError("missing subcommand")


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        _dispatch(args)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
