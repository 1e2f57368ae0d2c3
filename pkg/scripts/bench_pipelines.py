"""Direct versus PCA-preprocessed per-image classification time.

Uses colorectal-shaped (128x60x42) synthetic images so the spectral
reduction has realistic cost.  Writes classification_times_{direct,pca}.csv
and training_times.csv.

    python3 scripts/bench_pipelines.py [--out runs/bench] [--reps 200]
"""

import sys

from msicnn.cli import main
from msicnn.dataio import COLORECTAL_SHAPE

if __name__ == "__main__":
    args = sys.argv[1:]
    if "--out" not in args:
        args += ["--out", "runs/bench"]
    shape = "x".join(map(str, COLORECTAL_SHAPE))
    sys.exit(main(["bench", "--shape", shape, "--per-class", "4", "--preset", "desk", "--folds", "4", *args]))
