"""Command-line entry points for the fixtures.

Each trainer writes a run-artifact directory; the harness invokes these
as ordinary child commands:

    toy-classifier-train --out DIR [--n-train N] [--n-test N]
                         [--epochs N | --patience N] [--entropy LIST] [--lr F]
    toy-regressor-train  (same flags)
    entropy-stress --steps N [--threads N] [--out DIR]
"""

from __future__ import annotations

import argparse
import sys
from typing import List, Optional

from .config import FixtureConfig
from .stress import entropy_stress
from .training import toy_classifier_train, toy_regressor_train


def _trainer_parser(prog: str) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=prog)
    parser.add_argument("--out", required=True, metavar="DIR",
                        help="artifact directory to write")
    parser.add_argument("--n-train", type=int, default=200)
    parser.add_argument("--n-test", type=int, default=100)
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--epochs", type=int, default=None,
                       help="fixed epoch count (default 5)")
    group.add_argument("--patience", type=int, default=None,
                       help="stop after this many epochs without improvement")
    parser.add_argument("--entropy", default="getrandom,urandom",
                        help="comma list of OS entropy interfaces to draw from")
    parser.add_argument("--lr", type=float, default=0.05,
                        help="learning rate (0 freezes the loss stream)")
    return parser


def _config_from(args: argparse.Namespace, task: str,
                 parser: argparse.ArgumentParser) -> FixtureConfig:
    epochs: Optional[int] = args.epochs
    if epochs is None and args.patience is None:
        epochs = 5
    try:
        return FixtureConfig(
            task=task,
            n_train=args.n_train,
            n_test=args.n_test,
            epochs=epochs,
            patience=args.patience,
            entropy_paths=tuple(
                part.strip() for part in args.entropy.split(",") if part.strip()
            ),
            learning_rate=args.lr,
        )
    except ValueError as exc:
        parser.error(str(exc))
        raise AssertionError  # parser.error exits


def _run_trainer(task: str, prog: str, train, argv: Optional[List[str]]) -> int:
    parser = _trainer_parser(prog)
    raw_args = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(raw_args)
    config = _config_from(args, task, parser)
    try:
        result = train(config, out_dir=args.out, command=[prog, *raw_args])
    except OSError as exc:
        print(f"{prog}: cannot write artifact: {exc}", file=sys.stderr)
        return 1
    print(f"{prog}: {len(result.losses)} epoch(s), "
          f"final loss {result.losses[-1]!r}")
    return 0


def classifier_main(argv: Optional[List[str]] = None) -> int:
    return _run_trainer("classification", "toy-classifier-train",
                        toy_classifier_train, argv)


def regressor_main(argv: Optional[List[str]] = None) -> int:
    return _run_trainer("regression", "toy-regressor-train",
                        toy_regressor_train, argv)


def stress_main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="entropy-stress")
    parser.add_argument("--steps", type=int, default=24,
                        help="number of entropy requests to issue")
    parser.add_argument("--threads", type=int, default=0,
                        help="issue draws from this many racing threads")
    parser.add_argument("--out", metavar="DIR",
                        help="also write digest.txt into this directory")
    args = parser.parse_args(argv)
    if args.steps < 0:
        parser.error("--steps must be non-negative")
    if args.threads < 0:
        parser.error("--threads must be non-negative")
    try:
        digest = entropy_stress(args.steps, out_dir=args.out,
                                threads=args.threads)
    except OSError as exc:
        print(f"entropy-stress: {exc}", file=sys.stderr)
        return 1
    print(f"DIGEST {digest}")
    return 0


if __name__ == "__main__":
    sys.exit(classifier_main())
