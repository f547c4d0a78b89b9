"""Shared fixtures: compiled shim + child process runner."""

import os
import subprocess
import sys

import pytest

from repro.interposer import compiler_available, ensure_preload_library, preload_env

from testutil import PKG_ROOT


@pytest.fixture(scope="session")
def shim_path():
    if not compiler_available():
        pytest.skip("no C compiler on PATH; cannot build the preload shim")
    return ensure_preload_library()


@pytest.fixture
def child_runner(shim_path):
    """Run ``repro selftest-child`` under the shim and return the result.

    Keyword arguments mirror preload_env(); *args* is the child's argument
    list after ``selftest-child``.  The child runs with ``-S`` and a scrubbed
    environment so its startup entropy requests are identical between runs.
    """

    def run(args, mode="off", profile_dir=None, strict="abort", log_path=None,
            sources=None, script=None, timeout=60):
        env = preload_env(
            shim_path,
            mode=mode,
            profile_dir=profile_dir,
            strict=strict,
            log_path=log_path,
            sources=sources,
        )
        env["PYTHONPATH"] = str(PKG_ROOT)
        env.pop("PYTHONHASHSEED", None)
        if script is not None:
            cmd = [sys.executable, "-S", script, *args]
        else:
            cmd = [sys.executable, "-S", "-m", "repro", "selftest-child", *args]
        return subprocess.run(
            cmd, env=env, capture_output=True, text=True, timeout=timeout,
            cwd=os.fspath(PKG_ROOT.parent),
        )

    return run
