"""Build and configure the LD_PRELOAD entropy interposer.

The interposer itself is a small C library (``preload.c``, shipped as package
data) that hooks ``getrandom`` and the ``/dev/urandom`` open/read/close path
of a child process.  This module compiles it on demand with the system C
compiler, caches the result keyed by a hash of the source, and builds the
environment dictionaries that activate it in a subprocess.
"""

from __future__ import annotations

import hashlib
import os
import shutil
import subprocess
import tempfile
from pathlib import Path
from typing import Mapping, Optional, Sequence

__all__ = [
    "InterposerBuildError",
    "SOURCE_NAMES",
    "compiler_available",
    "ensure_preload_library",
    "preload_env",
    "preload_source_path",
]

#: Entropy sources the shim knows how to intercept, in RRR_SOURCES spelling.
SOURCE_NAMES = ("urandom-read", "getrandom")

_ENV_VARS = ("RRR_MODE", "RRR_DIR", "RRR_STRICT", "RRR_LOG", "RRR_SOURCES", "RRR_OWNER")


class InterposerBuildError(RuntimeError):
    """Raised when the preload library cannot be compiled."""


def preload_source_path() -> Path:
    """Path of the C source shipped inside the package."""
    return Path(__file__).resolve().parent / "preload.c"


def _default_cache_dir() -> Path:
    root = os.environ.get("XDG_CACHE_HOME")
    base = Path(root) if root else Path.home() / ".cache"
    return base / "repro-harness"


def compiler_available(cc: Optional[str] = None) -> bool:
    """True if a usable C compiler is on PATH."""
    return shutil.which(cc or os.environ.get("CC", "cc")) is not None


def ensure_preload_library(
    cache_dir: Optional[Path] = None,
    cc: Optional[str] = None,
    force: bool = False,
) -> Path:
    """Compile the preload shim if needed and return the shared-object path.

    The build is cached under *cache_dir* (default: ``~/.cache/repro-harness``)
    keyed by a digest of the C source, so repeated calls are cheap and editing
    the source invalidates stale builds.  Raises InterposerBuildError if no
    compiler is available or compilation fails.
    """
    source = preload_source_path()
    text = source.read_bytes()
    digest = hashlib.sha256(text).hexdigest()[:16]

    cache = Path(cache_dir) if cache_dir else _default_cache_dir()
    cache.mkdir(parents=True, exist_ok=True)
    target = cache / f"librrr_preload-{digest}.so"
    if target.exists() and not force:
        return target

    compiler = cc or os.environ.get("CC", "cc")
    if shutil.which(compiler) is None:
        raise InterposerBuildError(
            f"no C compiler found (looked for {compiler!r}); "
            "install one or set CC"
        )

    # Build to a temp name and rename so concurrent callers never load a
    # half-written library.
    fd, tmp_name = tempfile.mkstemp(dir=cache, suffix=".so.tmp")
    os.close(fd)
    cmd = [
        compiler,
        "-O2",
        "-Wall",
        "-shared",
        "-fPIC",
        "-o",
        tmp_name,
        str(source),
        "-ldl",
        "-lpthread",
    ]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        os.unlink(tmp_name)
        raise InterposerBuildError(
            f"compiling {source.name} failed (exit {proc.returncode}):\n{proc.stderr}"
        )
    os.replace(tmp_name, target)
    return target


def preload_env(
    library: Path,
    mode: str,
    profile_dir: Optional[Path] = None,
    strict: str = "abort",
    log_path: Optional[Path] = None,
    sources: Optional[Sequence[str]] = None,
    base_env: Optional[Mapping[str, str]] = None,
) -> dict:
    """Environment for a child process running under the interposer.

    Starts from *base_env* (default ``os.environ``), scrubs any stale RRR_*
    state so a harness run never inherits another session's markers, then sets
    LD_PRELOAD and the mode variables.  *sources* restricts interception to a
    subset of SOURCE_NAMES; None means all of them.
    """
    if mode not in ("record", "replay", "off"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode != "off" and profile_dir is None:
        raise ValueError(f"mode {mode!r} requires a profile directory")
    if strict not in ("abort", "warn"):
        raise ValueError(f"unknown strictness {strict!r}")
    if sources is not None:
        for name in sources:
            if name not in SOURCE_NAMES:
                raise ValueError(f"unknown source {name!r} (known: {SOURCE_NAMES})")

    env = dict(base_env if base_env is not None else os.environ)
    for var in _ENV_VARS:
        env.pop(var, None)

    preload = str(library)
    existing = env.get("LD_PRELOAD")
    env["LD_PRELOAD"] = f"{preload}:{existing}" if existing else preload
    env["RRR_MODE"] = mode
    if profile_dir is not None:
        env["RRR_DIR"] = str(profile_dir)
    env["RRR_STRICT"] = strict
    if log_path is not None:
        env["RRR_LOG"] = str(log_path)
    if sources is not None:
        env["RRR_SOURCES"] = ",".join(sources)
    return env
