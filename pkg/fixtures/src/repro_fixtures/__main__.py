"""Module entry point: ``python -m repro_fixtures <fixture> [flags]``.

Useful where the installed console scripts are not on PATH; the fixture
names map onto the same entry points.
"""

from __future__ import annotations

import sys

from . import cli

_FIXTURES = {
    "classifier": cli.classifier_main,
    "regressor": cli.regressor_main,
    "stress": cli.stress_main,
}


def main() -> int:
    if len(sys.argv) < 2 or sys.argv[1] not in _FIXTURES:
        names = ", ".join(sorted(_FIXTURES))
        print(f"usage: python -m repro_fixtures {{{names}}} [flags]",
              file=sys.stderr)
        return 2
    return _FIXTURES[sys.argv[1]](sys.argv[2:])


if __name__ == "__main__":
    sys.exit(main())
