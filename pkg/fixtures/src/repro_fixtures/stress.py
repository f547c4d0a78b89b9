"""Mixed-interface entropy consumption with a verifiable digest.

The stress op interleaves getrandom calls and urandom-device reads of
varying lengths and digests every byte drawn.  Two uninterposed runs
print different digests; a replayed run prints the recorded one.  An
optional threaded mode issues draws from several threads at once, which
makes the request order nondeterministic — exactly the situation a strict
replayer must surface instead of serving wrong bytes.
"""

from __future__ import annotations

import hashlib
import os
import threading
from typing import List, Optional

from .entropy import UrandomReader, draw_getrandom


def _step_size(i: int) -> int:
    return (i * 7) % 23 + 1


def entropy_stress(steps: int, out_dir: Optional[str] = None,
                   threads: int = 0) -> str:
    """Draw `steps` blocks, alternating interfaces; return the hex digest.

    Even-numbered steps use getrandom, odd-numbered steps read the
    urandom device, and block lengths vary with the step index.  With
    `threads` > 0 the draws are split across that many workers instead,
    with no ordering guarantee.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")

    if threads > 0:
        chunks: List[bytes] = [b""] * steps

        def worker(indices: List[int]) -> None:
            reader = UrandomReader()
            try:
                for i in indices:
                    if i % 2 == 0:
                        chunks[i] = draw_getrandom(_step_size(i))
                    else:
                        chunks[i] = reader.draw(_step_size(i))
            finally:
                reader.close()

        groups = [list(range(w, steps, threads)) for w in range(threads)]
        workers = [threading.Thread(target=worker, args=(g,)) for g in groups]
        for t in workers:
            t.start()
        for t in workers:
            t.join()
        digest = hashlib.sha256(b"".join(chunks)).hexdigest()
    else:
        reader = UrandomReader()
        hasher = hashlib.sha256()
        try:
            for i in range(steps):
                if i % 2 == 0:
                    hasher.update(draw_getrandom(_step_size(i)))
                else:
                    hasher.update(reader.draw(_step_size(i)))
        finally:
            reader.close()
        digest = hasher.hexdigest()

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "digest.txt"), "w", encoding="utf-8") as fh:
            fh.write(digest + "\n")
    return digest
