"""Learning-rate grid search on fold 0, then print the learning-curve CSV location.

    python3 scripts/grid_search.py [--lrs 0.05,0.01,0.001] [--epochs 40]
"""

import sys
from pathlib import Path

from msicnn.cli import main

SPEC = Path(__file__).parent / "configs" / "desk_cv.json"

if __name__ == "__main__":
    args = sys.argv[1:]
    if "--out" not in args:
        args += ["--out", "runs/grid"]
    sys.exit(main(["grid", "--spec", str(SPEC), *args]))
