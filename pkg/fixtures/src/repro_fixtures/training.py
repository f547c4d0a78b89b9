"""Tiny linear models trained with OS-entropy-driven stochasticity.

Both trainers follow the same recipe: synthesize a fixed dataset, draw
initial weights from the entropy pool, then run epochs that visit the
training set in a freshly drawn shuffle order.  The per-epoch loss is
evaluated after the epoch's updates over the training set in storage
order, summing left to right, so it is a deterministic function of the
final weights — and therefore of the entropy stream alone.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Callable, List, Optional, Sequence, Tuple

from . import artifact
from .config import MAX_EPOCHS, FixtureConfig
from .dataset import N_CLASSES, N_FEATURES, classification_data, regression_data
from .entropy import EntropyPool


@dataclass(frozen=True)
class TrainResult:
    task: str
    ground_truth: List
    predictions: List
    losses: List[float]
    baseline_loss: float
    wall_seconds: float


def _shuffled_order(pool: EntropyPool, n: int) -> List[int]:
    """Fisher-Yates permutation keyed by one entropy draw of 4n bytes."""
    raw = pool.draw(4 * n)
    keys = [int.from_bytes(raw[4 * i:4 * i + 4], "little") for i in range(n)]
    order = list(range(n))
    for i in range(n - 1, 0, -1):
        j = keys[i] % (i + 1)
        order[i], order[j] = order[j], order[i]
    return order


def _initial_weights(pool: EntropyPool, count: int) -> List[float]:
    raw = pool.draw(count)
    return [(b / 255.0 - 0.5) * 0.1 for b in raw]


def _dot(w: Sequence[float], x: Sequence[float]) -> float:
    total = 0.0
    for wi, xi in zip(w, x):
        total += wi * xi
    return total


def _argmax(scores: Sequence[float]) -> int:
    best = 0
    for i in range(1, len(scores)):
        if scores[i] > scores[best]:
            best = i
    return best


def _run_epochs(config: FixtureConfig, epoch_loss: Callable[[], float],
                baseline: float) -> List[float]:
    """Fixed-count or early-stop epoch loop.

    Early stop: the pre-training loss is the first value the training must
    beat; once `patience` consecutive epochs fail to improve on the best
    seen loss, training ends.  A constant loss stream therefore stops
    after exactly `patience` epochs.
    """
    losses: List[float] = []
    if config.epochs is not None:
        for _ in range(config.epochs):
            losses.append(epoch_loss())
        return losses
    best = baseline
    streak = 0
    while len(losses) < MAX_EPOCHS:
        loss = epoch_loss()
        losses.append(loss)
        if loss < best:
            best = loss
            streak = 0
        else:
            streak += 1
        if streak >= config.patience:
            break
    return losses


def toy_classifier_train(config: FixtureConfig,
                         out_dir: Optional[str] = None,
                         command: Optional[List[str]] = None) -> TrainResult:
    """Multiclass perceptron over the synthetic labeled dataset."""
    started = datetime.now(timezone.utc).isoformat()
    clock = time.perf_counter()
    train, test = classification_data(config.n_train, config.n_test)

    with EntropyPool(config.entropy_paths) as pool:
        weights = [
            _initial_weights(pool, N_FEATURES) for _ in range(N_CLASSES)
        ]

        def train_loss() -> float:
            total = 0.0
            for x, y in train:
                scores = [_dot(w, x) for w in weights]
                runner_up = max(s for c, s in enumerate(scores) if c != y)
                total += max(0.0, 1.0 + runner_up - scores[y])
            return total / len(train)

        def epoch() -> float:
            for i in _shuffled_order(pool, len(train)):
                x, y = train[i]
                scores = [_dot(w, x) for w in weights]
                guess = _argmax(scores)
                if guess != y:
                    for f in range(N_FEATURES):
                        weights[y][f] += config.learning_rate * x[f]
                        weights[guess][f] -= config.learning_rate * x[f]
            return train_loss()

        baseline = train_loss()
        losses = _run_epochs(config, epoch, baseline)
        predictions = [
            _argmax([_dot(w, x) for w in weights]) for x, _ in test
        ]

    wall = time.perf_counter() - clock
    result = TrainResult(
        task="classification",
        ground_truth=[y for _, y in test],
        predictions=predictions,
        losses=losses,
        baseline_loss=baseline,
        wall_seconds=wall,
    )
    if out_dir is not None:
        artifact.write_classification_artifact(
            out_dir,
            labels=result.ground_truth,
            predictions=result.predictions,
            losses=result.losses,
            wall_seconds=wall,
            command=command or ["toy-classifier-train"],
            started_at=started,
            ended_at=datetime.now(timezone.utc).isoformat(),
        )
    return result


def toy_regressor_train(config: FixtureConfig,
                        out_dir: Optional[str] = None,
                        command: Optional[List[str]] = None) -> TrainResult:
    """Linear least-squares SGD over the synthetic regression dataset."""
    started = datetime.now(timezone.utc).isoformat()
    clock = time.perf_counter()
    train, test = regression_data(config.n_train, config.n_test)

    with EntropyPool(config.entropy_paths) as pool:
        weights = _initial_weights(pool, N_FEATURES)

        def train_loss() -> float:
            total = 0.0
            for x, y in train:
                total += abs(_dot(weights, x) - y)
            return total / len(train)

        def epoch() -> float:
            for i in _shuffled_order(pool, len(train)):
                x, y = train[i]
                err = y - _dot(weights, x)
                for f in range(N_FEATURES):
                    weights[f] += config.learning_rate * err * x[f]
            return train_loss()

        baseline = train_loss()
        losses = _run_epochs(config, epoch, baseline)
        predictions = [_dot(weights, x) for x, _ in test]

    wall = time.perf_counter() - clock
    result = TrainResult(
        task="regression",
        ground_truth=[y for _, y in test],
        predictions=predictions,
        losses=losses,
        baseline_loss=baseline,
        wall_seconds=wall,
    )
    if out_dir is not None:
        artifact.write_regression_artifact(
            out_dir,
            truths=result.ground_truth,
            predictions=result.predictions,
            losses=result.losses,
            wall_seconds=wall,
            command=command or ["toy-regressor-train"],
            started_at=started,
            ended_at=datetime.now(timezone.utc).isoformat(),
        )
    return result
