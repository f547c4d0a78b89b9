"""Record-and-replay reproducibility harness.

Pins OS-provided entropy (reads of /dev/urandom and the getrandom call) by
recording it once and replaying it on later runs, verifies that two training
runs produced identical results, and diagnoses leftover nondeterminism from
syscall traces and function profiles.
"""

__version__ = "0.1.0"
