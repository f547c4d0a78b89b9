"""Deterministic synthetic datasets.

The data is a pure function of a fixed constant: two processes always see
the same instances, labels and targets.  Only the training procedure
(initialization and shuffling) consumes OS entropy, which is the property
the record-and-replay harness needs from its workloads.
"""

from __future__ import annotations

import hashlib
from typing import List, Tuple

_DATASET_TAG = b"repro-fixtures-dataset-v1:"

N_FEATURES = 8
N_CLASSES = 3


def _unit_floats(tag: bytes, count: int) -> List[float]:
    """Stretch the fixed constant into `count` floats in [0, 1)."""
    out: List[float] = []
    counter = 0
    while len(out) < count:
        digest = hashlib.sha256(
            _DATASET_TAG + tag + counter.to_bytes(4, "little")
        ).digest()
        for i in range(0, len(digest), 4):
            out.append(int.from_bytes(digest[i:i + 4], "little") / 2.0 ** 32)
        counter += 1
    return out[:count]


def _instances(count: int, offset: int) -> List[List[float]]:
    return [
        _unit_floats(b"x:%d" % (offset + i), N_FEATURES)
        for i in range(count)
    ]


def _projections() -> List[List[float]]:
    flat = _unit_floats(b"proj", N_CLASSES * N_FEATURES)
    return [
        [2.0 * v - 1.0 for v in flat[c * N_FEATURES:(c + 1) * N_FEATURES]]
        for c in range(N_CLASSES)
    ]


def _argmax(scores: List[float]) -> int:
    best = 0
    for i in range(1, len(scores)):
        if scores[i] > scores[best]:
            best = i
    return best


def classification_data(n_train: int, n_test: int
                        ) -> Tuple[List[Tuple[List[float], int]],
                                   List[Tuple[List[float], int]]]:
    """Labeled instances; the label is the argmax of fixed projections."""
    projections = _projections()

    def labelled(instances):
        out = []
        for x in instances:
            scores = [sum(w * v for w, v in zip(proj, x)) for proj in projections]
            out.append((x, _argmax(scores)))
        return out

    return (labelled(_instances(n_train, 0)),
            labelled(_instances(n_test, n_train)))


def regression_data(n_train: int, n_test: int
                    ) -> Tuple[List[Tuple[List[float], float]],
                               List[Tuple[List[float], float]]]:
    """Instances with a linear target plus small fixed perturbations."""
    weights = [2.0 * v - 1.0 for v in _unit_floats(b"regw", N_FEATURES)]
    noise = _unit_floats(b"regnoise", n_train + n_test)

    def targeted(instances, noise_offset):
        out = []
        for i, x in enumerate(instances):
            clean = sum(w * v for w, v in zip(weights, x))
            out.append((x, clean + 0.1 * (noise[noise_offset + i] - 0.5)))
        return out

    return (targeted(_instances(n_train, 10_000), 0),
            targeted(_instances(n_test, 10_000 + n_train), n_train))
