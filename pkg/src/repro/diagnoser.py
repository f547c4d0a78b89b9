"""Trace and profile analysis: find randomness sources, plan mitigations.

Two text inputs drive the diagnosis:

  * a system-call trace in the de-facto line format ``name(args...) = ret``
    (pid prefixes, ``<unfinished ...>``/``resumed`` splits and signal noise
    are tolerated), matched against a catalog of randomness-introducing
    system calls;
  * a function-level profiler table (ncalls / filename:lineno(function)
    rows), cross-checked against a catalog of library functions with known
    hardware-nondeterministic behaviour.

Catalogs are external JSON files so they can evolve with kernels and
frameworks; the defaults shipped with the package cover the entropy system
calls (getrandom, reads of /dev/urandom) and the classic GPU accumulation
offenders (bias_add, unsorted_segment_sum, sparse_dense_matmul).

The output is a deterministic report plus an update plan: which system
calls to add to the interception list, which patches to apply, and which
findings have no known mitigation (blockers).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

try:
    from importlib.resources import files as _pkg_files
except ImportError:  # pragma: no cover - 3.8 fallback, not expected here
    from importlib_resources import files as _pkg_files

__all__ = [
    "CatalogError",
    "SyscallRule",
    "SyscallCatalog",
    "NondetRule",
    "NondetCatalog",
    "TraceFinding",
    "TraceParse",
    "FunctionProfile",
    "LibFinding",
    "UpdatePlan",
    "DiagnosisReport",
    "MATCH_SYSCALL_NAME",
    "MATCH_PATH_ARGUMENT",
    "PATCH_AVAILABLE",
    "PATCH_EXPERIMENTAL",
    "PATCH_NONE",
    "default_syscall_catalog_path",
    "default_nondet_catalog_path",
    "load_syscall_catalog",
    "load_nondet_catalog",
    "parse_syscall_trace",
    "parse_function_profile",
    "cross_check_nondeterminism",
    "build_diagnosis",
    "render_diagnosis",
]

CATALOG_SCHEMA_VERSION = 1

MATCH_SYSCALL_NAME = "syscall-name"
MATCH_PATH_ARGUMENT = "path-argument"

PATCH_AVAILABLE = "available"
PATCH_EXPERIMENTAL = "experimental"
PATCH_NONE = "none"


class CatalogError(ValueError):
    """A catalog file is malformed or violates its schema."""


# ---------------------------------------------------------------------------
# catalogs


@dataclass(frozen=True)
class SyscallRule:
    name: str
    match_kind: str
    path_pattern: Optional[str] = None
    min_kernel: Optional[str] = None


@dataclass(frozen=True)
class SyscallCatalog:
    entries: Tuple[SyscallRule, ...]


@dataclass(frozen=True)
class NondetRule:
    function_pattern: str
    framework: str
    affected_versions: str
    cause: str
    patch_status: str
    remediation: str


@dataclass(frozen=True)
class NondetCatalog:
    entries: Tuple[NondetRule, ...]


def default_syscall_catalog_path() -> Path:
    return Path(str(_pkg_files("repro") / "catalogs" / "syscalls.json"))


def default_nondet_catalog_path() -> Path:
    return Path(str(_pkg_files("repro") / "catalogs" / "nondet.json"))


def _load_catalog_doc(path: Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CatalogError(f"{path}: cannot read catalog ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise CatalogError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("schema_version") != CATALOG_SCHEMA_VERSION:
        raise CatalogError(f"{path}: missing or unsupported schema_version")
    if not isinstance(doc.get("entries"), list):
        raise CatalogError(f"{path}: 'entries' must be a list")
    return doc


def load_syscall_catalog(path: Optional[Union[str, Path]] = None) -> SyscallCatalog:
    path = Path(path) if path is not None else default_syscall_catalog_path()
    doc = _load_catalog_doc(path)
    rules = []
    seen = set()
    for i, raw in enumerate(doc["entries"]):
        name = raw.get("name")
        kind = raw.get("match_kind")
        if not name or kind not in (MATCH_SYSCALL_NAME, MATCH_PATH_ARGUMENT):
            raise CatalogError(f"{path}: entry {i} needs a name and a valid match_kind")
        if name in seen:
            raise CatalogError(f"{path}: duplicate rule name {name!r}")
        seen.add(name)
        pattern = raw.get("path_pattern")
        if kind == MATCH_PATH_ARGUMENT and not pattern:
            raise CatalogError(f"{path}: path-argument rule {name!r} needs a path_pattern")
        rules.append(SyscallRule(
            name=name,
            match_kind=kind,
            path_pattern=pattern,
            min_kernel=raw.get("min_kernel"),
        ))
    return SyscallCatalog(entries=tuple(rules))


def load_nondet_catalog(path: Optional[Union[str, Path]] = None) -> NondetCatalog:
    path = Path(path) if path is not None else default_nondet_catalog_path()
    doc = _load_catalog_doc(path)
    rules = []
    seen = set()
    for i, raw in enumerate(doc["entries"]):
        pattern = raw.get("function_pattern")
        framework = raw.get("framework", "")
        status = raw.get("patch_status")
        if not pattern or status not in (PATCH_AVAILABLE, PATCH_EXPERIMENTAL, PATCH_NONE):
            raise CatalogError(
                f"{path}: entry {i} needs function_pattern and a valid patch_status"
            )
        if (framework, pattern) in seen:
            raise CatalogError(
                f"{path}: duplicate pattern {pattern!r} for framework {framework!r}"
            )
        seen.add((framework, pattern))
        rules.append(NondetRule(
            function_pattern=pattern,
            framework=framework,
            affected_versions=raw.get("affected_versions", ""),
            cause=raw.get("cause", ""),
            patch_status=status,
            remediation=raw.get("remediation", ""),
        ))
    return NondetCatalog(entries=tuple(rules))


# ---------------------------------------------------------------------------
# system-call trace parsing


@dataclass(frozen=True)
class TraceFinding:
    """One catalog rule that matched somewhere in a trace."""

    syscall: str          # syscall of the first matching line
    line_number: int      # 1-based, first matching line
    count: int            # matching entropy requests
    evidence: str         # first matching line, verbatim
    matched_rule: str     # catalog rule name


@dataclass(frozen=True)
class TraceParse:
    findings: Tuple[TraceFinding, ...]
    skipped_lines: int    # lines that fit no known shape


_PID_PREFIX = re.compile(r"^(?:\[pid\s+(?P<pid1>\d+)\]\s+|(?P<pid2>\d+)\s+)")
_CALL_LINE = re.compile(
    r"^(?P<name>[A-Za-z_][\w.]*)\((?P<args>.*)\)\s*=\s*(?P<ret>\S.*)$"
)
_UNFINISHED = re.compile(r"^(?P<prefix>[A-Za-z_][\w.]*\(.*?)\s*<unfinished \.\.\.>$")
_RESUMED = re.compile(r"^<\.\.\.\s+(?P<name>[\w.]+)\s+resumed>\s*(?P<rest>.*)$")
_FIRST_QUOTED = re.compile(r'"([^"]*)"')
_LEADING_FD = re.compile(r"^\s*(\d+)")

# Calls that deliver file content: the only place a path-argument rule counts
# an entropy request.  Opens and closes locate the descriptor but move no
# entropy, so counting them would break the one-request-one-record invariant
# against recorded profiles.
_READ_SYSCALLS = frozenset(
    {"read", "pread", "pread64", "readv", "preadv", "preadv2"}
)
_OPEN_SYSCALLS = frozenset(
    {"open", "open64", "openat", "openat64", "openat2", "creat"}
)
_CLOSE_SYSCALLS = frozenset({"close"})


class _RuleHits:
    def __init__(self, rule: SyscallRule):
        self.rule = rule
        self.count = 0
        self.first_line_number = 0
        self.first_syscall = ""
        self.evidence = ""

    def hit(self, syscall: str, line_number: int, line: str) -> None:
        if self.count == 0:
            self.first_line_number = line_number
            self.first_syscall = syscall
            self.evidence = line
        self.count += 1


def _return_value(ret: str) -> Optional[int]:
    token = ret.strip().split()[0] if ret.strip() else ""
    try:
        return int(token, 0)
    except ValueError:
        return None


def parse_syscall_trace(text: str, catalog: SyscallCatalog) -> TraceParse:
    """Match a system-call trace against the catalog.

    Returns one finding per rule with at least one matching entropy request
    (a successful call; failed calls move no entropy).  Unrecognizable lines
    are skipped but tallied so silent data loss stays visible.
    """
    hits = {rule.name: _RuleHits(rule) for rule in catalog.entries}
    skipped = 0
    # (pid, fd) -> path, built from successful opens so that read lines
    # without an inline path still match path rules.
    fd_paths: Dict[Tuple[Optional[str], int], str] = {}
    # (pid, syscall) -> (line_number, prefix) for split call lines.
    pending: Dict[Tuple[Optional[str], str], Tuple[int, str]] = {}

    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip()
        stripped = line.strip()
        if not stripped:
            continue

        pid = None
        m = _PID_PREFIX.match(stripped)
        if m:
            pid = m.group("pid1") or m.group("pid2")
            stripped = stripped[m.end():]

        # Signal deliveries and exit markers are well-formed noise.
        if stripped.startswith("+++") or stripped.startswith("---"):
            continue

        m = _UNFINISHED.match(stripped)
        if m:
            name = m.group("prefix").split("(", 1)[0]
            pending[(pid, name)] = (line_number, m.group("prefix"))
            continue

        m = _RESUMED.match(stripped)
        if m:
            start = pending.pop((pid, m.group("name")), None)
            if start is None:
                skipped += 1
                continue
            line_number, prefix = start
            stripped = prefix + m.group("rest")

        m = _CALL_LINE.match(stripped)
        if m is None:
            skipped += 1
            continue
        name, args, ret = m.group("name"), m.group("args"), m.group("ret")
        retval = _return_value(ret)

        if name in _OPEN_SYSCALLS:
            quoted = _FIRST_QUOTED.search(args)
            if quoted and retval is not None and retval >= 0:
                fd_paths[(pid, retval)] = quoted.group(1)
        elif name in _CLOSE_SYSCALLS:
            fd = _LEADING_FD.match(args)
            if fd:
                fd_paths.pop((pid, int(fd.group(1))), None)

        if retval is None or retval < 0:
            continue  # parsed fine, but no entropy was delivered

        for rule_hits in hits.values():
            rule = rule_hits.rule
            if rule.match_kind == MATCH_SYSCALL_NAME:
                if name == rule.name:
                    rule_hits.hit(name, line_number, stripped)
            else:
                if name not in _READ_SYSCALLS:
                    continue
                matched = rule.path_pattern in args
                if not matched:
                    fd = _LEADING_FD.match(args)
                    if fd:
                        path = fd_paths.get((pid, int(fd.group(1))))
                        matched = path is not None and rule.path_pattern in path
                if matched:
                    rule_hits.hit(name, line_number, stripped)

    findings = tuple(
        TraceFinding(
            syscall=h.first_syscall,
            line_number=h.first_line_number,
            count=h.count,
            evidence=h.evidence,
            matched_rule=h.rule.name,
        )
        for h in hits.values()
        if h.count > 0
    )
    return TraceParse(findings=findings, skipped_lines=skipped)


# ---------------------------------------------------------------------------
# function-profile parsing


@dataclass(frozen=True)
class FunctionProfile:
    stats: Tuple[Tuple[str, int], ...]   # (function identifier, call count)
    skipped_rows: int


_NCALLS = re.compile(r"^(\d+)(?:/(\d+))?$")


def parse_function_profile(text: str) -> FunctionProfile:
    """Parse a profiler table into (function, call count) pairs.

    Everything before the column-header line (the one naming ncalls and the
    function column) is preamble.  Rows whose first column is "a/b" take the
    first number.  Malformed rows after the header are tallied, not fatal.
    """
    stats: List[Tuple[str, int]] = []
    skipped = 0
    in_table = False
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if not in_table:
            if "ncalls" in line and "function" in line:
                in_table = True
            continue
        columns = line.split(None, 5)
        m = _NCALLS.match(columns[0]) if columns else None
        if m is None or len(columns) < 6:
            skipped += 1
            continue
        stats.append((columns[5], int(m.group(1))))
    return FunctionProfile(stats=tuple(stats), skipped_rows=skipped)


# ---------------------------------------------------------------------------
# nondeterminism cross-check and planning


@dataclass(frozen=True)
class LibFinding:
    """A profiled function that matches a known-nondeterministic pattern."""

    function: str
    call_count: int
    rule: NondetRule


def cross_check_nondeterminism(
    stats: Sequence[Tuple[str, int]], catalog: NondetCatalog
) -> List[LibFinding]:
    """Match profiled function names against the catalog by substring."""
    findings = []
    for function, count in stats:
        for rule in catalog.entries:
            if rule.function_pattern in function:
                findings.append(LibFinding(function=function, call_count=count, rule=rule))
    return findings


@dataclass(frozen=True)
class UpdatePlan:
    syscalls_to_intercept: Tuple[str, ...]
    patches_to_apply: Tuple[LibFinding, ...]
    blockers: Tuple[LibFinding, ...]

    @property
    def empty(self) -> bool:
        return not (self.syscalls_to_intercept or self.patches_to_apply or self.blockers)


@dataclass(frozen=True)
class DiagnosisReport:
    trace_findings: Tuple[TraceFinding, ...]
    lib_findings: Tuple[LibFinding, ...]
    plan: UpdatePlan
    skipped_trace_lines: int = 0
    skipped_profile_rows: int = 0

    @property
    def fully_mitigable(self) -> bool:
        return not self.plan.blockers


def build_diagnosis(
    trace_findings: Sequence[TraceFinding],
    lib_findings: Sequence[LibFinding],
    current_intercepts: Sequence[str],
    skipped_trace_lines: int = 0,
    skipped_profile_rows: int = 0,
) -> DiagnosisReport:
    """Turn findings into a mitigation plan against the current intercepts."""
    current = set(current_intercepts)
    to_intercept = []
    for finding in trace_findings:
        rule = finding.matched_rule
        if rule not in current and rule not in to_intercept:
            to_intercept.append(rule)

    patches: List[LibFinding] = []
    blockers: List[LibFinding] = []
    seen_rules = set()
    for finding in lib_findings:
        key = (finding.rule.framework, finding.rule.function_pattern)
        if key in seen_rules:
            continue
        seen_rules.add(key)
        if finding.rule.patch_status == PATCH_NONE:
            blockers.append(finding)
        else:
            patches.append(finding)

    return DiagnosisReport(
        trace_findings=tuple(trace_findings),
        lib_findings=tuple(lib_findings),
        plan=UpdatePlan(
            syscalls_to_intercept=tuple(to_intercept),
            patches_to_apply=tuple(patches),
            blockers=tuple(blockers),
        ),
        skipped_trace_lines=skipped_trace_lines,
        skipped_profile_rows=skipped_profile_rows,
    )


# ---------------------------------------------------------------------------
# rendering


def _as_plain(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return {k: _as_plain(getattr(obj, k)) for k in obj.__dataclass_fields__}
    if isinstance(obj, (list, tuple)):
        return [_as_plain(v) for v in obj]
    return obj


def render_diagnosis(report: DiagnosisReport, format: str = "text") -> str:
    """Deterministic text or JSON rendering of a diagnosis report."""
    if format == "json":
        body = _as_plain(report)
        body["schema_version"] = CATALOG_SCHEMA_VERSION
        body["fully_mitigable"] = report.fully_mitigable
        return json.dumps(body, indent=2, sort_keys=True) + "\n"
    if format != "text":
        raise ValueError(f"unknown report format {format!r}")

    lines = []
    lines.append("randomness-introducing system calls:")
    if report.trace_findings:
        for f in report.trace_findings:
            lines.append(
                f"  {f.matched_rule}: {f.count} request(s), "
                f"first {f.syscall} at line {f.line_number}"
            )
    else:
        lines.append("  none found")
    if report.skipped_trace_lines:
        lines.append(f"  ({report.skipped_trace_lines} unparseable trace line(s) skipped)")

    lines.append("nondeterministic library functions:")
    if report.lib_findings:
        for f in report.lib_findings:
            lines.append(
                f"  {f.function}: {f.call_count} call(s) — {f.rule.cause} "
                f"[patch {f.rule.patch_status}]"
            )
    else:
        lines.append("  none found")
    if report.skipped_profile_rows:
        lines.append(f"  ({report.skipped_profile_rows} malformed profile row(s) skipped)")

    plan = report.plan
    lines.append("plan:")
    if plan.empty:
        lines.append("  nothing to do; fully mitigated")
    else:
        for name in plan.syscalls_to_intercept:
            lines.append(f"  add to interception list: {name}")
        for f in plan.patches_to_apply:
            lines.append(
                f"  apply patch ({f.rule.patch_status}): {f.rule.function_pattern}"
                f" — {f.rule.remediation}"
            )
        for f in plan.blockers:
            lines.append(
                f"  blocker: {f.rule.function_pattern} — {f.rule.remediation}"
            )
    if not report.fully_mitigable:
        lines.append("verdict: not fully mitigable")
    else:
        lines.append("verdict: mitigable")
    return "\n".join(lines) + "\n"
