"""Per-image classification timing and training-time tables.

Two pipelines are compared on one network:

``direct``
    images are already in the network's input space; only the forward
    pass is timed.
``pca``
    raw multispectral images go through spectral reduction (and spatial
    zero-padding, if the network wants a larger input) before the forward
    pass, all inside the timed region.
"""

import csv
import time
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .dataio import MultispectralImage
from .errors import ConfigError, DimensionError, EmptyDatasetError
from .network import Network
from .preprocess import SpectralPCA, apply_pca, pad_image

PIPELINES = ("direct", "pca")


@dataclass
class TimingRecord:
    pipeline: str
    n_images: int
    repetitions: int
    warmup: int
    per_image_ms: float
    per_image_ms_sd: float


def _to_input(net: Network, image: MultispectralImage, pca: Optional[SpectralPCA]) -> np.ndarray:
    h, w, c = net.config.input_shape
    if image.channels != c:
        if pca is None or c != pca.components.shape[0]:
            raise DimensionError(f"network expects {c} channels, image has {image.channels} and no matching basis")
        image = apply_pca(pca, image)
    if image.height < h or image.width < w:
        image = pad_image(image, h, w)
    if image.shape != (h, w, c):
        raise DimensionError(f"image shape {image.shape} cannot be fed to a {(h, w, c)} network")
    return image.pixels.astype(net.dtype)


def _pipeline_fn(net: Network, images: Sequence[MultispectralImage], pipeline: str,
                 pca: Optional[SpectralPCA]) -> Callable[[int], object]:
    if pipeline == "direct":
        ready = [_to_input(net, im, pca) for im in images]
        return lambda i: net.forward(ready[i % len(ready)])
    if pipeline == "pca":
        if pca is None:
            raise ConfigError("the pca pipeline needs a fitted basis")
        return lambda i: net.forward(_to_input(net, images[i % len(images)], pca))
    raise ConfigError(f"unknown pipeline {pipeline!r}; choose from {PIPELINES}")


def compare(net: Network, images: Sequence[MultispectralImage], pipelines: Sequence[str] = PIPELINES,
            pca: Optional[SpectralPCA] = None, warmup: int = 10, repetitions: int = 100) -> Dict[str, TimingRecord]:
    """Time each pipeline with a monotonic clock, interleaving pipelines
    within every repetition so slow drifts in machine load hit all alike."""
    if not images:
        raise EmptyDatasetError("no images to benchmark")
    if repetitions < 1 or warmup < 0:
        raise ConfigError("repetitions must be >= 1 and warmup >= 0")
    fns = {p: _pipeline_fn(net, images, p, pca) for p in pipelines}
    for i in range(warmup):
        for fn in fns.values():
            fn(i)
    samples = {p: np.empty(repetitions) for p in fns}
    for r in range(repetitions):
        for p, fn in fns.items():
            t0 = time.perf_counter_ns()
            fn(r)
            samples[p][r] = (time.perf_counter_ns() - t0) / 1e6
    return {p: TimingRecord(p, len(images), repetitions, warmup, float(s.mean()),
                            float(s.std(ddof=1)) if repetitions > 1 else 0.0)
            for p, s in samples.items()}


def benchmark(net: Network, images: Sequence[MultispectralImage], pipeline: str = "direct",
              pca: Optional[SpectralPCA] = None, warmup: int = 10, repetitions: int = 100) -> TimingRecord:
    return compare(net, images, (pipeline,), pca, warmup, repetitions)[pipeline]


CLASSIFICATION_COLUMNS = ("method", "dataset", "per_image_ms", "per_image_ms_sd", "repetitions", "warmup")
TRAINING_COLUMNS = ("method", "dataset", "time_per_epoch_s", "total_training_s")


def write_classification_times(records: Sequence[TimingRecord], path, dataset: str = "synthetic"):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(CLASSIFICATION_COLUMNS)
        for rec in records:
            out.writerow([rec.pipeline, dataset, f"{rec.per_image_ms:.6f}", f"{rec.per_image_ms_sd:.6f}",
                          rec.repetitions, rec.warmup])


def write_training_times(rows: Sequence[dict], path):
    with open(path, "w", newline="") as fh:
        out = csv.DictWriter(fh, TRAINING_COLUMNS, lineterminator="\n")
        out.writeheader()
        for row in rows:
            out.writerow(row)
