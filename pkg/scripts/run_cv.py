"""Desk-scale k-fold cross-validation on the default synthetic data.

    python3 scripts/run_cv.py [--out runs/desk_cv] [extra msicnn cv flags]
"""

import sys
from pathlib import Path

from msicnn.cli import main

SPEC = Path(__file__).parent / "configs" / "desk_cv.json"

if __name__ == "__main__":
    sys.exit(main(["cv", "--spec", str(SPEC), *sys.argv[1:]]))
