"""Session fixtures for the fixture-package tests."""

import pytest

from repro.interposer import ensure_preload_library


@pytest.fixture(scope="session")
def preload_shim():
    """Build (or reuse) the interception library once per session."""
    return ensure_preload_library()
