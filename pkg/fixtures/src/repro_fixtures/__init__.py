"""Toy training programs for exercising a record-and-replay harness.

Every stochastic decision in these fixtures — weight initialization and
batch shuffling — is derived from bytes drawn through the operating
system's entropy interfaces (the getrandom call and reads of the urandom
device).  Nothing here seeds an in-process generator, so pinning those two
interfaces pins the programs completely.

The fixtures are deliberately independent of the harness package: they
talk to it only through its external surfaces (being invoked as child
commands, and writing the run-artifact directory format).
"""

from .config import FixtureConfig
from .training import toy_classifier_train, toy_regressor_train
from .stress import entropy_stress

__all__ = [
    "FixtureConfig",
    "toy_classifier_train",
    "toy_regressor_train",
    "entropy_stress",
]
