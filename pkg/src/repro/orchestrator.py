"""Drive training commands through record/replay and the diagnosis loop.

This module owns everything the CLI does between "spawn the child" and
"print the verdict": running one command under the interposer, verifying
artifact pairs, diagnosing traces, the full multi-phase pipeline, asset
hashing, the self-test and the overhead timing report.

Exit-code contract used throughout:

    0  reproducible / success
    1  not reproducible, or blocked by an unmitigable finding
    2  usage or input error
    3  replay divergence (surfaced from the interposed child)
    4  child process failure
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

from . import interposer
from .diagnoser import (
    SyscallCatalog,
    build_diagnosis,
    load_syscall_catalog,
    parse_syscall_trace,
    render_diagnosis,
)
from .interposer import InterposerBuildError, ensure_preload_library, preload_env
from .stats import cliffs_delta, delta_magnitude, rank_sum_test
from .verifier import (
    ArtifactError,
    RunArtifact,
    compare_runs,
    load_run_artifact,
    render_report,
)

__all__ = [
    "EXIT_OK",
    "EXIT_NOT_REPRODUCIBLE",
    "EXIT_USAGE",
    "EXIT_DIVERGENCE",
    "EXIT_CHILD_FAILURE",
    "UsageError",
    "RunConfig",
    "RunResult",
    "run_command",
    "verify_artifacts",
    "diagnose_files",
    "run_pipeline",
    "hash_paths",
    "run_selftest",
    "TimingReport",
    "timing_report",
    "render_timing",
]

EXIT_OK = 0
EXIT_NOT_REPRODUCIBLE = 1
EXIT_USAGE = 2
EXIT_DIVERGENCE = 3
EXIT_CHILD_FAILURE = 4

ARTIFACT_DIR_PLACEHOLDER = "{artifact_dir}"


class UsageError(ValueError):
    """Bad invocation or unreadable input; maps to exit code 2."""


def _warn(message: str) -> None:
    print(f"repro: {message}", file=sys.stderr)


# ---------------------------------------------------------------------------
# single runs


def resolve_tracer(requested: str = "auto") -> str:
    """Pick the trace source: the system tracer when present, otherwise the
    interposer's own request log (record mode only)."""
    if requested == "auto":
        return "strace" if shutil.which("strace") else "builtin"
    if requested == "strace":
        if not shutil.which("strace"):
            raise UsageError("strace requested but not found on PATH")
        return "strace"
    if requested == "builtin":
        return "builtin"
    raise UsageError(f"unknown tracer {requested!r}")


@dataclass(frozen=True)
class RunConfig:
    """One command execution under the interposer."""

    mode: str
    profile_dir: Path
    command: Tuple[str, ...]
    trace_enabled: bool = False
    artifact_dir: Optional[Path] = None
    strict: str = "abort"
    sources: Optional[Tuple[str, ...]] = None
    trace_path: Optional[Path] = None
    tracer: str = "auto"


@dataclass(frozen=True)
class RunResult:
    child_returncode: int
    exit_code: int
    wall_seconds: float
    artifact_dir: Optional[Path]
    trace_path: Optional[Path]
    profile_dir: Path

    @property
    def artifact(self) -> Optional[RunArtifact]:
        if self.artifact_dir is None or not self.artifact_dir.is_dir():
            return None
        return load_run_artifact(self.artifact_dir)


def _substitute_command(command: Sequence[str], artifact_dir: Optional[Path]) -> List[str]:
    if artifact_dir is None:
        return list(command)
    return [arg.replace(ARTIFACT_DIR_PLACEHOLDER, str(artifact_dir)) for arg in command]


def run_command(config: RunConfig) -> RunResult:
    """Spawn the configured command under the preload shim and wait for it.

    The child's stdout/stderr flow through unchanged.  The returned exit
    code is already mapped to the harness contract (3 for a divergence
    abort, 4 for any other child failure).
    """
    if not config.command:
        raise UsageError("no command given")
    if config.mode not in ("record", "replay", "off"):
        raise UsageError(f"unknown mode {config.mode!r}")

    profile_dir = Path(config.profile_dir)
    if config.mode == "replay":
        # A replay must never create or mutate profile state.
        if not profile_dir.is_dir():
            raise UsageError(f"replay needs an existing profile directory: {profile_dir}")
    elif config.mode == "record":
        profile_dir.mkdir(parents=True, exist_ok=True)

    artifact_dir = Path(config.artifact_dir) if config.artifact_dir else None
    if artifact_dir is not None:
        artifact_dir.mkdir(parents=True, exist_ok=True)

    try:
        library = ensure_preload_library()
    except InterposerBuildError as exc:
        raise UsageError(str(exc)) from exc

    trace_path: Optional[Path] = None
    tracer = None
    log_path: Optional[Path] = None
    if config.trace_enabled:
        tracer = resolve_tracer(config.tracer)
        trace_path = Path(config.trace_path) if config.trace_path else profile_dir / "trace.txt"
        if tracer == "builtin":
            if config.mode == "record":
                _warn("no system tracer found; using the interposer request log "
                      "as the trace source")
                log_path = trace_path
            else:
                _warn("no system tracer found and the request log only covers "
                      "record mode; no trace will be produced")
                trace_path = None

    env = preload_env(
        library,
        mode=config.mode,
        profile_dir=profile_dir if config.mode != "off" else None,
        strict=config.strict,
        log_path=log_path,
        sources=config.sources,
    )
    command = _substitute_command(config.command, artifact_dir)
    if artifact_dir is not None:
        env["REPRO_ARTIFACT_DIR"] = str(artifact_dir)

    if tracer == "strace":
        # strace itself must run without the shim: scope the activation
        # variables to the traced command with env(1).
        scoped = {}
        for key in ("LD_PRELOAD", "RRR_MODE", "RRR_DIR", "RRR_STRICT",
                    "RRR_LOG", "RRR_SOURCES"):
            if key in env:
                scoped[key] = env.pop(key)
        assignments = [f"{k}={v}" for k, v in scoped.items()]
        command = ["strace", "-f", "-o", str(trace_path), "--",
                   "env", *assignments, *command]

    if trace_path is not None and trace_path.exists():
        trace_path.unlink()

    start = time.perf_counter()
    try:
        proc = subprocess.run(command, env=env)
    except FileNotFoundError as exc:
        raise UsageError(f"cannot run command: {exc}") from exc
    wall = time.perf_counter() - start

    if proc.returncode == 0:
        exit_code = EXIT_OK
    elif proc.returncode == EXIT_DIVERGENCE:
        exit_code = EXIT_DIVERGENCE
    else:
        exit_code = EXIT_CHILD_FAILURE

    return RunResult(
        child_returncode=proc.returncode,
        exit_code=exit_code,
        wall_seconds=wall,
        artifact_dir=artifact_dir,
        trace_path=trace_path if trace_path and trace_path.exists() else None,
        profile_dir=profile_dir,
    )


# ---------------------------------------------------------------------------
# verify / diagnose


def verify_artifacts(path_a: Union[str, Path], path_b: Union[str, Path],
                     as_json: bool = False,
                     out: Optional[Callable[[str], None]] = None) -> int:
    """Compare two artifact directories; returns the verdict exit code."""
    write = out if out is not None else sys.stdout.write
    try:
        a = load_run_artifact(path_a)
        b = load_run_artifact(path_b)
        report = compare_runs(a, b)
    except (ArtifactError, ValueError) as exc:
        _warn(str(exc))
        return EXIT_USAGE
    write(render_report(report, "json" if as_json else "text"))
    return EXIT_OK if report.reproducible else EXIT_NOT_REPRODUCIBLE


def diagnose_files(trace_path: Union[str, Path],
                   prof_path: Optional[Union[str, Path]] = None,
                   syscall_catalog_path: Optional[Union[str, Path]] = None,
                   nondet_catalog_path: Optional[Union[str, Path]] = None,
                   current_intercepts: Sequence[str] = (),
                   out: Optional[Callable[[str], None]] = None) -> int:
    """Diagnose a trace (and optionally a function profile); print the plan."""
    write = out if out is not None else sys.stdout.write
    from .diagnoser import (  # local import keeps CLI startup light
        cross_check_nondeterminism,
        load_nondet_catalog,
        parse_function_profile,
    )

    try:
        trace_text = Path(trace_path).read_text(encoding="utf-8", errors="replace")
    except OSError as exc:
        _warn(f"cannot read trace: {exc}")
        return EXIT_USAGE
    try:
        syscat = load_syscall_catalog(syscall_catalog_path)
        nondetcat = load_nondet_catalog(nondet_catalog_path)
    except ValueError as exc:
        _warn(str(exc))
        return EXIT_USAGE

    trace = parse_syscall_trace(trace_text, syscat)
    lib_findings = []
    skipped_rows = 0
    if prof_path is not None:
        try:
            prof_text = Path(prof_path).read_text(encoding="utf-8", errors="replace")
        except OSError as exc:
            _warn(f"cannot read profile: {exc}")
            return EXIT_USAGE
        profile = parse_function_profile(prof_text)
        lib_findings = cross_check_nondeterminism(profile.stats, nondetcat)
        skipped_rows = profile.skipped_rows

    report = build_diagnosis(
        trace.findings,
        lib_findings,
        current_intercepts=current_intercepts,
        skipped_trace_lines=trace.skipped_lines,
        skipped_profile_rows=skipped_rows,
    )
    write(render_diagnosis(report))
    return EXIT_OK if report.fully_mitigable else EXIT_NOT_REPRODUCIBLE


# ---------------------------------------------------------------------------
# the phase loop


@dataclass
class PipelineState:
    work: Path
    catalog: SyscallCatalog
    max_iterations: int
    iteration: int = 0
    intercepts: List[str] = field(default_factory=list)
    reproducible: bool = False
    blocked: bool = False
    phase_log: List[str] = field(default_factory=list)


def run_pipeline(command: Sequence[str], work_dir: Union[str, Path],
                 max_iterations: int, out_dir: Optional[Union[str, Path]] = None,
                 tracer: str = "auto",
                 echo: Callable[[str], None] = print) -> int:
    """Execute the full loop: baseline runs, verify, trace+diagnose, extend
    the interception list, record+replay, verify again; repeat until the
    verdict is reproducible, a blocker appears, or the budget runs out.

    A machine-readable summary lands in <out>/report.json on every exit
    path.
    """
    if max_iterations < 1:
        raise UsageError("--max-iters must be at least 1")
    if not command:
        raise UsageError("no command given")

    work = Path(work_dir)
    work.mkdir(parents=True, exist_ok=True)
    out = Path(out_dir) if out_dir else work / "artifacts"
    out.mkdir(parents=True, exist_ok=True)

    state = PipelineState(
        work=work, catalog=load_syscall_catalog(), max_iterations=max_iterations
    )

    def log(message: str) -> None:
        state.phase_log.append(message)
        echo(message)

    def finish(exit_code: int) -> int:
        report = {
            "schema_version": 1,
            "reproducible": state.reproducible,
            "blocked": state.blocked,
            "iterations": state.iteration,
            "intercepts": list(state.intercepts),
            "exit_code": exit_code,
            "phases": list(state.phase_log),
        }
        (out / "report.json").write_text(
            json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        return exit_code

    def run_to_artifact(tag: str, mode: str, profile_dir: Path,
                        trace_enabled: bool = False,
                        trace_path: Optional[Path] = None,
                        sources: Optional[Sequence[str]] = None) -> Tuple[RunResult, Optional[RunArtifact]]:
        result = run_command(RunConfig(
            mode=mode,
            profile_dir=profile_dir,
            command=tuple(command),
            trace_enabled=trace_enabled,
            artifact_dir=out / tag,
            sources=tuple(sources) if sources is not None else None,
            trace_path=trace_path,
            tracer=tracer,
        ))
        if result.exit_code == EXIT_OK:
            try:
                return result, load_run_artifact(out / tag)
            except ArtifactError as exc:
                raise UsageError(
                    f"command produced no usable artifact at {out / tag}: {exc}"
                ) from exc
        return result, None

    try:
        return _pipeline_phases(state, run_to_artifact, log, finish)
    except UsageError as exc:
        log(f"pipeline: {exc}")
        return finish(EXIT_USAGE)


def _pipeline_phases(state: PipelineState, run_to_artifact, log, finish) -> int:
    # Phase 1: two baseline runs with interception off.
    log("phase 1: two baseline runs (interception off)")
    result_a, art_a = run_to_artifact("baseline-a", "off", state.work / "black-hole")
    if art_a is None:
        log(f"phase 1: first baseline run failed (exit {result_a.child_returncode})")
        return finish(result_a.exit_code)
    result_b, art_b = run_to_artifact("baseline-b", "off", state.work / "black-hole")
    if art_b is None:
        log(f"phase 1: second baseline run failed (exit {result_b.child_returncode})")
        return finish(result_b.exit_code)

    # Phase 2: verify the baselines.
    report = compare_runs(art_a, art_b)
    if report.reproducible:
        log("phase 2: baseline runs already identical — nothing to mitigate")
        state.reproducible = True
        return finish(EXIT_OK)
    log(
        "phase 2: baseline runs differ "
        f"({report.inconsistent_prediction_count} inconsistent prediction(s), "
        f"loss divergence at epoch {report.loss_first_divergence})"
    )

    while state.iteration < state.max_iterations:
        state.iteration += 1
        it = state.iteration
        iter_dir = state.work / f"iter-{it}"
        log(f"iteration {it} of {state.max_iterations}")

        # Phase 3: traced run + diagnosis.  Record with every known source
        # active so the trace sees all interceptable entropy.
        trace_file = iter_dir / "trace.txt"
        log(f"phase 3: traced record run (trace: {trace_file})")
        traced, _ = run_to_artifact(
            f"iter-{it}-traced", "record", iter_dir / "trace-profiles",
            trace_enabled=True, trace_path=trace_file,
            sources=interposer.SOURCE_NAMES,
        )
        if traced.exit_code != EXIT_OK:
            log(f"phase 3: traced run failed (exit {traced.child_returncode})")
            return finish(traced.exit_code)
        trace_text = trace_file.read_text() if trace_file.exists() else ""
        parsed = parse_syscall_trace(trace_text, state.catalog)
        diagnosis = build_diagnosis(
            parsed.findings, [], current_intercepts=state.intercepts,
            skipped_trace_lines=parsed.skipped_lines,
        )
        if parsed.findings:
            found = ", ".join(
                f"{f.matched_rule} ({f.count})" for f in parsed.findings
            )
        else:
            found = "none"
        log(f"phase 3: randomness findings: {found}")

        # Phase 4: extend the interception list from the plan.
        if diagnosis.plan.blockers:
            names = ", ".join(b.rule.function_pattern for b in diagnosis.plan.blockers)
            log(f"phase 4: unmitigable findings ({names}); stopping")
            state.blocked = True
            return finish(EXIT_NOT_REPRODUCIBLE)
        additions = [
            name for name in diagnosis.plan.syscalls_to_intercept
            if name in interposer.SOURCE_NAMES
        ]
        unsupported = [
            name for name in diagnosis.plan.syscalls_to_intercept
            if name not in interposer.SOURCE_NAMES
        ]
        if unsupported:
            log("phase 4: findings with no available interceptor: "
                + ", ".join(unsupported))
        if not additions:
            log("phase 4: no new interceptable sources; the remaining "
                "nondeterminism is outside this harness — stopping")
            state.blocked = bool(unsupported)
            return finish(EXIT_NOT_REPRODUCIBLE)
        state.intercepts.extend(additions)
        log("phase 4: interception list now: " + ", ".join(state.intercepts))

        # Phase 5: record once, replay once, verify the pair.
        profiles = iter_dir / "profiles"
        log("phase 5: record run + replay run under interception")
        recorded, rec_art = run_to_artifact(
            f"iter-{it}-record", "record", profiles, sources=state.intercepts
        )
        if rec_art is None:
            log(f"phase 5: record run failed (exit {recorded.child_returncode})")
            return finish(recorded.exit_code)
        replayed, rep_art = run_to_artifact(
            f"iter-{it}-replay", "replay", profiles, sources=state.intercepts
        )
        if rep_art is None:
            if replayed.exit_code == EXIT_DIVERGENCE:
                log("phase 5: replay diverged from the recorded profile; "
                    "the command's request sequence is unstable")
                continue
            log(f"phase 5: replay run failed (exit {replayed.child_returncode})")
            return finish(replayed.exit_code)

        verdict = compare_runs(rec_art, rep_art)
        if verdict.reproducible:
            log(f"phase 2: record and replay runs identical — "
                f"REPRODUCIBLE after {it} iteration(s)")
            state.reproducible = True
            return finish(EXIT_OK)
        log(
            "phase 2: record and replay runs still differ "
            f"({verdict.inconsistent_prediction_count} inconsistent prediction(s))"
        )

    log(f"pipeline: iteration budget ({state.max_iterations}) exhausted")
    return finish(EXIT_NOT_REPRODUCIBLE)


# ---------------------------------------------------------------------------
# asset hashing


def hash_paths(paths: Sequence[Union[str, Path]], algo: str = "sha256",
               out: Callable[[str], None] = print) -> int:
    """Print `algo:hexdigest  path` lines, sorted by path, for files and
    directory trees."""
    if algo not in ("sha1", "sha256"):
        raise UsageError(f"unsupported algorithm {algo!r}")
    files: List[Path] = []
    for raw in paths:
        path = Path(raw)
        if path.is_file():
            files.append(path)
        elif path.is_dir():
            files.extend(p for p in path.rglob("*") if p.is_file())
        else:
            _warn(f"not a regular file or directory: {path}")
            return EXIT_USAGE
    for path in sorted(files, key=lambda p: str(p)):
        digest = hashlib.new(algo)
        try:
            with open(path, "rb") as fh:
                for chunk in iter(lambda: fh.read(1 << 20), b""):
                    digest.update(chunk)
        except OSError as exc:
            _warn(f"cannot read {path}: {exc}")
            return EXIT_USAGE
        out(f"{algo}:{digest.hexdigest()}  {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# self-test


def _consumer_env(library: Path, **kwargs) -> dict:
    env = preload_env(library, **kwargs)
    # The consumer runs with -S (stable startup entropy), so the package
    # source tree must be importable without site-packages.
    pkg_root = Path(__file__).resolve().parent.parent
    env["PYTHONPATH"] = str(pkg_root)
    return env


def _run_consumer(library: Path, args: Sequence[str], **env_kwargs) -> Tuple[int, str, str]:
    env = _consumer_env(library, **env_kwargs)
    proc = subprocess.run(
        [sys.executable, "-S", "-m", "repro", "selftest-child", *args],
        env=env, capture_output=True, text=True, timeout=120,
    )
    return proc.returncode, proc.stdout, proc.stderr


def _digest_from(stdout: str) -> Optional[str]:
    for line in stdout.splitlines():
        if line.startswith("DIGEST "):
            return line.split(" ", 1)[1]
    return None


def run_selftest(trials: int = 20, pattern: str = "g:32,u:16",
                 echo: Callable[[str], None] = print) -> int:
    """Exercise the whole record/replay stack end to end.

    Each trial checks three properties with a fresh profile directory:
    two uninterposed runs draw different entropy, a replay reproduces its
    record run exactly, and replaying twice gives the same answer.  One
    extra check flips a byte in a recorded profile and expects the replay
    to either abort or produce a different digest.
    """
    try:
        library = ensure_preload_library()
    except InterposerBuildError as exc:
        echo(f"selftest: FAIL — cannot build the preload library: {exc}")
        return EXIT_NOT_REPRODUCIBLE

    def fail(prop: str) -> int:
        echo(f"selftest: FAIL — {prop}")
        return EXIT_NOT_REPRODUCIBLE

    args = ["--pattern", pattern]
    for trial in range(1, trials + 1):
        with tempfile.TemporaryDirectory(prefix="repro-selftest-") as tmp:
            profdir = Path(tmp) / "profiles"
            profdir.mkdir()

            rc1, out1, err1 = _run_consumer(library, args, mode="off")
            rc2, out2, _ = _run_consumer(library, args, mode="off")
            d_off1, d_off2 = _digest_from(out1), _digest_from(out2)
            if rc1 or rc2 or d_off1 is None or d_off2 is None:
                return fail(f"trial {trial}: consumer failed under off mode: {err1}")
            if d_off1 == d_off2:
                return fail(
                    f"trial {trial}: two uninterposed runs produced the same "
                    "digest; entropy is not flowing"
                )

            rc, out_rec, err = _run_consumer(
                library, args, mode="record", profile_dir=profdir
            )
            d_rec = _digest_from(out_rec)
            if rc or d_rec is None:
                return fail(f"trial {trial}: record run failed: {err}")
            rc, out_rep1, err = _run_consumer(
                library, args, mode="replay", profile_dir=profdir
            )
            d_rep1 = _digest_from(out_rep1)
            if rc or d_rep1 is None:
                return fail(f"trial {trial}: replay run failed: {err}")
            if d_rep1 != d_rec:
                return fail(f"trial {trial}: replay digest differs from record digest")
            rc, out_rep2, err = _run_consumer(
                library, args, mode="replay", profile_dir=profdir
            )
            d_rep2 = _digest_from(out_rep2)
            if rc or d_rep2 != d_rep1:
                return fail(f"trial {trial}: replay is not idempotent")
        echo(f"selftest: trial {trial}/{trials} ok")

    # Tamper check: a flipped payload byte must not replay cleanly.
    with tempfile.TemporaryDirectory(prefix="repro-selftest-") as tmp:
        profdir = Path(tmp) / "profiles"
        profdir.mkdir()
        rc, out_rec, err = _run_consumer(library, args, mode="record", profile_dir=profdir)
        d_rec = _digest_from(out_rec)
        if rc or d_rec is None:
            return fail(f"tamper check: record run failed: {err}")
        target = profdir / "getrandom.conf"
        blob = bytearray(target.read_bytes())
        blob[-1] ^= 0x01
        target.write_bytes(bytes(blob))
        rc, out_rep, _ = _run_consumer(library, args, mode="replay", profile_dir=profdir)
        d_rep = _digest_from(out_rep)
        if rc == 0 and d_rep == d_rec:
            return fail("tampered profile replayed to an identical digest")
    echo("selftest: tamper check ok")
    echo(f"selftest: PASS ({trials} trials)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# timing


@dataclass(frozen=True)
class TimingReport:
    n_without: int
    n_with: int
    mean_without: float
    mean_with: float
    ratio: float
    p_value: float
    p_exact: bool
    delta: float
    magnitude: str


def _walls(samples: Sequence[Union[RunArtifact, float]]) -> List[float]:
    walls = []
    for sample in samples:
        walls.append(float(getattr(sample, "wall_seconds", sample)))
    return walls


def timing_report(samples_without: Sequence[Union[RunArtifact, float]],
                  samples_with: Sequence[Union[RunArtifact, float]]) -> TimingReport:
    """Summarize recording overhead from paired wall-time samples.

    Accepts loaded run artifacts or plain seconds.  The effect size is
    oriented so that positive delta means the interposed runs are slower.
    """
    without = _walls(samples_without)
    with_ = _walls(samples_with)
    if len(without) < 2 or len(with_) < 2:
        raise ValueError("timing report needs at least two samples per side")
    mean_without = sum(without) / len(without)
    mean_with = sum(with_) / len(with_)
    if mean_without == 0:
        raise ValueError("degenerate baseline: zero mean wall time")
    test = rank_sum_test(with_, without)
    delta = cliffs_delta(with_, without)
    return TimingReport(
        n_without=len(without),
        n_with=len(with_),
        mean_without=mean_without,
        mean_with=mean_with,
        ratio=mean_with / mean_without,
        p_value=test.p_value,
        p_exact=test.exact,
        delta=delta,
        magnitude=delta_magnitude(delta),
    )


def render_timing(report: TimingReport) -> str:
    lines = [
        f"baseline: n={report.n_without}, mean {report.mean_without:.6f}s",
        f"interposed: n={report.n_with}, mean {report.mean_with:.6f}s",
        f"overhead ratio: {report.ratio:.3f}x",
        f"rank-sum p-value: {report.p_value:.6g}"
        + (" (exact)" if report.p_exact else " (normal approximation)"),
        f"effect size: {report.delta:+.3f} ({report.magnitude})",
    ]
    return "\n".join(lines) + "\n"
