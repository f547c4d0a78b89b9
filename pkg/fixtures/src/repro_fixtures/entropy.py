"""Operating-system entropy access for the fixtures.

Two interfaces, matching what a preload interposer can capture: the C
library's getrandom function (resolved through the dynamic loader, so an
LD_PRELOAD hook sees it) and plain reads of the urandom character device.
Draw sizes depend only on the fixture configuration, so the request
sequence of a run is stable and can be replayed strictly.
"""

from __future__ import annotations

import ctypes
import os
from typing import Optional, Sequence

from .config import ENTROPY_GETRANDOM, ENTROPY_URANDOM

_getrandom_fn = None


def draw_getrandom(n: int, flags: int = 0) -> bytes:
    """Draw exactly n bytes through the libc getrandom symbol."""
    global _getrandom_fn
    if _getrandom_fn is None:
        libc = ctypes.CDLL(None, use_errno=True)
        fn = libc.getrandom
        fn.restype = ctypes.c_ssize_t
        fn.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_uint]
        _getrandom_fn = fn
    out = b""
    while len(out) < n:
        buf = ctypes.create_string_buffer(n - len(out))
        got = _getrandom_fn(buf, n - len(out), flags)
        if got < 0:
            raise OSError(ctypes.get_errno(), "getrandom failed")
        out += buf.raw[:got]
    return out


class UrandomReader:
    """A lazily opened descriptor on the urandom device."""

    def __init__(self, path: str = "/dev/urandom"):
        self._path = path
        self._fd: Optional[int] = None

    def draw(self, n: int) -> bytes:
        if self._fd is None:
            self._fd = os.open(self._path, os.O_RDONLY)
        out = b""
        while len(out) < n:
            chunk = os.read(self._fd, n - len(out))
            if not chunk:
                raise OSError(f"unexpected end of stream from {self._path}")
            out += chunk
        return out

    def close(self) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None


class EntropyPool:
    """Round-robin draws over the configured OS entropy interfaces.

    Each call site asks for a block of bytes; successive calls alternate
    between the enabled interfaces so a typical training run exercises
    both, like real frameworks that mix library RNG seeding with direct
    device reads.
    """

    def __init__(self, paths: Sequence[str]):
        self._paths = tuple(paths)
        self._urandom = UrandomReader()
        self._turn = 0

    def draw(self, n: int) -> bytes:
        path = self._paths[self._turn % len(self._paths)]
        self._turn += 1
        if path == ENTROPY_GETRANDOM:
            return draw_getrandom(n)
        if path == ENTROPY_URANDOM:
            return self._urandom.draw(n)
        raise ValueError(f"unknown entropy path {path!r}")

    def close(self) -> None:
        self._urandom.close()

    def __enter__(self) -> "EntropyPool":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()
