"""Helpers shared between test modules.

Kept outside conftest.py so the module's import name stays unique when
several test trees (each with its own conftest) run in one session.
"""

from pathlib import Path

import repro

# Source tree the child needs on PYTHONPATH: children run with -S (no site
# packages), so the editable install is not visible to them.
PKG_ROOT = Path(repro.__file__).resolve().parent.parent


def digest_of(proc) -> str:
    """Extract the DIGEST line a consumer child printed."""
    for line in proc.stdout.splitlines():
        if line.startswith("DIGEST "):
            return line.split(" ", 1)[1]
    raise AssertionError(
        f"no DIGEST in child output\nstdout: {proc.stdout!r}\nstderr: {proc.stderr!r}"
    )
