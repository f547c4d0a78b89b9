"""Command-line entry point.

Subcommands::

    repro run --mode record|replay|off --dir P [--trace] [--out A] -- CMD...
    repro verify A B [--json]
    repro diagnose --trace F [--prof F] [--syscall-catalog F] [--nondet-catalog F]
    repro pipeline --dir P --max-iters N [--out D] -- CMD...
    repro hash [--algo sha1|sha256] PATH...
    repro selftest

Environment knobs honored by `run` and `pipeline`: REPRO_TRACER chooses the
trace source (auto | strace | builtin); RRR_STRICT and RRR_SOURCES, when set,
are forwarded into the child's interposer configuration.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import List, Optional, Tuple

from . import interposer
from .orchestrator import (
    EXIT_USAGE,
    RunConfig,
    UsageError,
    diagnose_files,
    hash_paths,
    run_command,
    run_pipeline,
    run_selftest,
    verify_artifacts,
)


def _split_command(argv: List[str]) -> Tuple[List[str], List[str]]:
    """Split at the first `--`: options for us, the command for the child."""
    if "--" in argv:
        idx = argv.index("--")
        return argv[:idx], argv[idx + 1:]
    return argv, []


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="repro",
        description="Record-and-replay reproducibility harness for "
                    "entropy-consuming training commands.",
    )
    sub = parser.add_subparsers(dest="subcommand", metavar="COMMAND")

    run_p = sub.add_parser(
        "run", help="run one command under the interposer (command after --)"
    )
    run_p.add_argument("--mode", required=True, choices=("record", "replay", "off"))
    run_p.add_argument("--dir", required=True, dest="profile_dir",
                       help="profile directory (recorded entropy lives here)")
    run_p.add_argument("--trace", action="store_true",
                       help="capture a system-call trace of the run")
    run_p.add_argument("--out", dest="artifact_dir",
                       help="artifact directory handed to the command "
                            "({artifact_dir} in CMD is substituted)")

    verify_p = sub.add_parser("verify", help="compare two run artifacts")
    verify_p.add_argument("a", help="first artifact directory")
    verify_p.add_argument("b", help="second artifact directory")
    verify_p.add_argument("--json", action="store_true",
                          help="emit the report as JSON instead of text")

    diag_p = sub.add_parser(
        "diagnose", help="find randomness sources in a trace and, optionally, "
                         "nondeterministic functions in a profile"
    )
    diag_p.add_argument("--trace", required=True, dest="trace_file",
                        help="system-call trace text file")
    diag_p.add_argument("--prof", dest="prof_file",
                        help="function profile text file")
    diag_p.add_argument("--syscall-catalog", dest="syscall_catalog",
                        help="override the built-in system-call catalog")
    diag_p.add_argument("--nondet-catalog", dest="nondet_catalog",
                        help="override the built-in nondeterminism catalog")

    pipe_p = sub.add_parser(
        "pipeline", help="baseline, diagnose, intercept, and re-verify until "
                         "reproducible (command after --)"
    )
    pipe_p.add_argument("--dir", required=True, dest="work_dir",
                        help="working directory for profiles and traces")
    pipe_p.add_argument("--max-iters", required=True, type=int,
                        help="iteration budget for the mitigation loop")
    pipe_p.add_argument("--out", dest="out_dir",
                        help="artifact output directory (default: DIR/artifacts)")

    hash_p = sub.add_parser("hash", help="print stable digests of files or trees")
    hash_p.add_argument("--algo", choices=("sha1", "sha256"), default="sha256")
    hash_p.add_argument("paths", nargs="+", metavar="PATH")

    sub.add_parser("selftest", help="exercise record/replay end to end")

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args_list = list(sys.argv[1:] if argv is None else argv)
    # Internal helper process; kept out of --help on purpose.
    if args_list and args_list[0] == "selftest-child":
        from . import consumer

        return consumer.main(args_list[1:])

    head, command = _split_command(args_list)
    parser = build_parser()
    args = parser.parse_args(head)
    if args.subcommand is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    if command and args.subcommand not in ("run", "pipeline"):
        print(f"repro {args.subcommand}: does not take a command after --",
              file=sys.stderr)
        return EXIT_USAGE

    try:
        if args.subcommand == "run":
            return _cmd_run(args, command)
        if args.subcommand == "verify":
            return verify_artifacts(args.a, args.b, as_json=args.json)
        if args.subcommand == "diagnose":
            return diagnose_files(
                args.trace_file, args.prof_file,
                args.syscall_catalog, args.nondet_catalog,
            )
        if args.subcommand == "pipeline":
            if not command:
                raise UsageError("pipeline requires a command after --")
            return run_pipeline(
                command, args.work_dir, args.max_iters, args.out_dir,
                tracer=os.environ.get("REPRO_TRACER", "auto"),
            )
        if args.subcommand == "hash":
            return hash_paths(args.paths, args.algo)
        if args.subcommand == "selftest":
            return run_selftest()
    except UsageError as exc:
        print(f"repro: {exc}", file=sys.stderr)
        return EXIT_USAGE
    raise AssertionError(f"unhandled subcommand {args.subcommand!r}")


def _forwarded_sources() -> Optional[Tuple[str, ...]]:
    raw = os.environ.get("RRR_SOURCES")
    if raw is None:
        return None
    names = tuple(part.strip() for part in raw.split(",") if part.strip())
    for name in names:
        if name not in interposer.SOURCE_NAMES:
            raise UsageError(f"unknown source in RRR_SOURCES: {name!r}")
    return names


def _cmd_run(args: argparse.Namespace, command: List[str]) -> int:
    if not command:
        raise UsageError("run requires a command after --")
    strict = os.environ.get("RRR_STRICT", "abort")
    if strict not in ("abort", "warn"):
        raise UsageError(f"invalid RRR_STRICT value {strict!r}")
    result = run_command(RunConfig(
        mode=args.mode,
        profile_dir=args.profile_dir,
        command=tuple(command),
        trace_enabled=args.trace,
        artifact_dir=args.artifact_dir,
        strict=strict,
        sources=_forwarded_sources(),
        tracer=os.environ.get("REPRO_TRACER", "auto"),
    ))
    print(f"run: mode={args.mode} exit={result.exit_code} "
          f"(child status {result.child_returncode}, "
          f"wall {result.wall_seconds:.3f}s)")
    if result.trace_path is not None:
        print(f"trace: {result.trace_path}")
    if result.artifact_dir is not None:
        print(f"artifact: {result.artifact_dir}")
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
