"""Shared configuration for the toy training fixtures."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

TASK_CLASSIFICATION = "classification"
TASK_REGRESSION = "regression"

ENTROPY_GETRANDOM = "getrandom"
ENTROPY_URANDOM = "urandom"
KNOWN_ENTROPY_PATHS = (ENTROPY_GETRANDOM, ENTROPY_URANDOM)

# Patience mode needs a hard stop in case the loss keeps inching down.
MAX_EPOCHS = 200


@dataclass(frozen=True)
class FixtureConfig:
    """Desk-scale training parameters.

    Exactly one of ``epochs`` (fixed-length training) and ``patience``
    (stop once the loss has not improved for that many consecutive
    epochs, measured against the pre-training baseline and every later
    best) must be set.
    """

    task: str = TASK_CLASSIFICATION
    n_train: int = 200
    n_test: int = 100
    epochs: Optional[int] = 5
    patience: Optional[int] = None
    entropy_paths: Tuple[str, ...] = field(default=KNOWN_ENTROPY_PATHS)
    learning_rate: float = 0.05

    def __post_init__(self):
        if self.task not in (TASK_CLASSIFICATION, TASK_REGRESSION):
            raise ValueError(f"unknown task {self.task!r}")
        if self.n_train < 1:
            raise ValueError("n_train must be at least 1")
        if self.n_test < 1:
            raise ValueError("n_test must be at least 1")
        if (self.epochs is None) == (self.patience is None):
            raise ValueError("set exactly one of epochs and patience")
        if self.epochs is not None and self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be at least 1")
        if not self.entropy_paths:
            raise ValueError("at least one entropy path is required")
        for path in self.entropy_paths:
            if path not in KNOWN_ENTROPY_PATHS:
                raise ValueError(f"unknown entropy path {path!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
