import csv

import numpy as np
import pytest

from msicnn.bench import (CLASSIFICATION_COLUMNS, TRAINING_COLUMNS, benchmark, compare, write_classification_times,
                          write_training_times)
from msicnn.dataio import MultispectralImage
from msicnn.errors import ConfigError, DimensionError, EmptyDatasetError
from msicnn.network import build, tiny_preset
from msicnn.preprocess import fit_pca
from msicnn.rng import stream


@pytest.fixture
def setup(rng):
    images = [MultispectralImage(rng.random((8, 8, 6)).astype(np.float32)) for _ in range(4)]
    pca = fit_pca(images)
    net = build(tiny_preset((8, 8, 3)), stream(0, "init"))
    return net, images, pca


def test_compare_returns_both_pipelines(setup):
    net, images, pca = setup
    recs = compare(net, images, ("direct", "pca"), pca, warmup=2, repetitions=5)
    assert set(recs) == {"direct", "pca"}
    for rec in recs.values():
        assert rec.repetitions == 5 and rec.warmup == 2 and rec.per_image_ms > 0 and rec.n_images == 4


def test_pca_pipeline_needs_a_basis(setup):
    net, images, _ = setup
    with pytest.raises(ConfigError):
        benchmark(net, images, "pca")
    with pytest.raises(DimensionError):
        benchmark(net, images, "direct")
    with pytest.raises(ConfigError):
        benchmark(net, images, "fft")


def test_empty_image_list(setup):
    net, _, pca = setup
    with pytest.raises(EmptyDatasetError):
        compare(net, [], pca=pca)


def test_direct_pipeline_pads_small_inputs(rng):
    net = build(tiny_preset((10, 10, 2)), stream(0, "init"))
    rec = benchmark(net, [MultispectralImage(rng.random((8, 6, 2)))], warmup=0, repetitions=2)
    assert rec.per_image_ms > 0


def test_csv_columns(setup, tmp_path):
    net, images, pca = setup
    rec = benchmark(net, images, "pca", pca, warmup=0, repetitions=2)
    write_classification_times([rec], tmp_path / "c.csv", "8x8x6")
    write_training_times([{"method": "m", "dataset": "d", "time_per_epoch_s": 1, "total_training_s": 2}],
                         tmp_path / "t.csv")
    with open(tmp_path / "c.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CLASSIFICATION_COLUMNS and rows[1][:2] == ["pca", "8x8x6"]
    with open(tmp_path / "t.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == TRAINING_COLUMNS and rows[1] == ["m", "d", "1", "2"]
