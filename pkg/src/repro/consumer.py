"""Deterministic entropy consumer used by the self-test and the test suite.

Runs as a child process (``repro selftest-child`` or ``python -m repro
selftest-child``) and draws operating-system entropy according to a small
pattern language, then prints a digest of everything it drew:

    g:32    one getrandom() call for 32 bytes
    u:16    one read() of 16 bytes from /dev/urandom
    r:8     one read() of 8 bytes from /dev/random (deliberately an
            entropy source the interposer does not cover)

A run is reproducible exactly when two invocations print the same DIGEST
line.  With ``--out`` the child also derives a toy run artifact from the
drawn bytes, which gives the orchestrator tests a stand-in for a training
job whose outputs depend on OS entropy and nothing else.
"""

from __future__ import annotations

import argparse
import ctypes
import hashlib
import os
import sys
import time
from datetime import datetime, timezone
from typing import List, Optional, Tuple

_GETRANDOM = None


def _draw_getrandom(n: int, flags: int = 0) -> bytes:
    """Draw n bytes through the C library's getrandom symbol.

    ctypes resolves the symbol through the dynamic loader, so an LD_PRELOAD
    interposer sees this call exactly like any other library call.
    """
    global _GETRANDOM
    if _GETRANDOM is None:
        libc = ctypes.CDLL(None, use_errno=True)
        fn = libc.getrandom
        fn.restype = ctypes.c_ssize_t
        fn.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_uint]
        _GETRANDOM = fn
    buf = ctypes.create_string_buffer(n)
    got = _GETRANDOM(buf, n, flags)
    if got < 0:
        raise OSError(ctypes.get_errno(), "getrandom failed")
    return buf.raw[:got]


def parse_pattern(text: str) -> List[Tuple[str, int]]:
    """Parse "g:32,u:16" into [("g", 32), ("u", 16)]."""
    steps = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        try:
            kind, _, size = token.partition(":")
            n = int(size)
        except ValueError:
            raise ValueError(f"bad pattern token {token!r}")
        if kind not in ("g", "u", "r") or n <= 0:
            raise ValueError(f"bad pattern token {token!r}")
        steps.append((kind, n))
    return steps


class _DeviceReader:
    """Lazily opened file descriptor for a character device."""

    def __init__(self, path: str):
        self.path = path
        self.fd: Optional[int] = None

    def draw(self, n: int) -> bytes:
        if self.fd is None:
            self.fd = os.open(self.path, os.O_RDONLY)
        return os.read(self.fd, n)

    def close(self) -> None:
        if self.fd is not None:
            os.close(self.fd)
            self.fd = None


def _expand(seed: bytes, n: int) -> bytes:
    """Stretch a digest into n deterministic bytes."""
    out = b""
    counter = 0
    while len(out) < n:
        out += hashlib.sha256(seed + counter.to_bytes(4, "little")).digest()
        counter += 1
    return out[:n]


def _write_artifact(out_dir: str, drawn_digest: bytes, wall: float, command: List[str]) -> None:
    """Derive a toy classification run artifact from the drawn entropy.

    The artifact is a pure function of the digest, so identical entropy
    streams yield byte-identical predictions, accuracies and losses.
    """
    from .verifier import write_run_artifact

    material = _expand(drawn_digest, 33 + 6)
    labels = [str(i % 3) for i in range(30)]
    predictions = [str(b % 3) for b in material[:30]]
    losses = []
    for i in range(3):
        raw = int.from_bytes(material[30 + 2 * i : 32 + 2 * i], "little")
        losses.append(2.0 - raw / 65536.0)
    started = datetime.now(timezone.utc).isoformat()
    write_run_artifact(
        out_dir,
        task="classification",
        labels=labels,
        predictions=predictions,
        losses=losses,
        epochs=len(losses),
        wall_seconds=wall,
        command=command,
        started_at=started,
        ended_at=datetime.now(timezone.utc).isoformat(),
    )


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="repro selftest-child",
        description="draw OS entropy in a fixed pattern and print its digest",
    )
    parser.add_argument("--pattern", default="g:32,u:16",
                        help="comma list of draws, e.g. g:32,u:16,r:8 (default %(default)s)")
    parser.add_argument("--repeat", type=int, default=1,
                        help="repeat the whole pattern N times (default 1)")
    parser.add_argument("--time-loop", action="store_true",
                        help="print LOOP_SECONDS measured around the draw loop")
    parser.add_argument("--out", metavar="DIR",
                        help="also write a toy run artifact derived from the draws")
    args = parser.parse_args(argv)

    try:
        steps = parse_pattern(args.pattern)
    except ValueError as exc:
        parser.error(str(exc))

    urandom = _DeviceReader("/dev/urandom")
    devrandom = _DeviceReader("/dev/random")
    digest = hashlib.sha256()

    start = time.perf_counter()
    for _ in range(max(args.repeat, 1)):
        for kind, n in steps:
            if kind == "g":
                chunk = _draw_getrandom(n)
            elif kind == "u":
                chunk = urandom.draw(n)
            else:
                chunk = devrandom.draw(n)
            digest.update(chunk)
    elapsed = time.perf_counter() - start
    urandom.close()
    devrandom.close()

    if args.time_loop:
        print(f"LOOP_SECONDS {elapsed!r}")
    if args.out:
        _write_artifact(args.out, digest.digest(), elapsed, list(sys.argv))
    print(f"DIGEST {digest.hexdigest()}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
