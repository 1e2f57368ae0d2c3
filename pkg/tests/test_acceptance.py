"""The twelve numbered acceptance criteria, each at its stated tolerance.

A PASS/FAIL line per criterion is printed in the pytest terminal summary.
"""

import csv
import hashlib
import json
import math
import os
import time

import numpy as np
import pytest

from msicnn.cli import main
from msicnn.dataio import COLORECTAL_SHAPE, MultispectralImage, Sample, decode_msi, encode_msi
from msicnn.layers import Conv2D, Dense, MaxPool2D, ReLU
from msicnn.network import (InitSpec, NetworkConfig, build, cross_entropy, from_bytes, load_checkpoint,
                            paper_preset, save_checkpoint, softmax, tiny_preset, to_bytes, xavier_init)
from msicnn.preprocess import (AugmentationPolicy, SpectralPCA, apply_pca, augment, augment_samples, decode_pca,
                               encode_pca, fit_pca, flip)
from msicnn.rng import stream
from msicnn.trainer import EarlyStopping, fold_assignment, kfold_split

from oracles import central_difference, conv_loops, partition_laws, propagate_shape, rel_err

# Desk-scale run settings for criterion 4 (see README for the choice of rate).
DESK_LR = "5e-3"
DESK_BATCH = "8"
DESK_EPOCHS = "150"


def detail(record_property, text):
    print(text)
    record_property("detail", text)


def file_sha256(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.mark.acceptance(1, "gradient correctness")
def test_gradient_correctness(record_property):
    t0 = time.perf_counter()
    net = build(tiny_preset(dtype="float64"), stream(1, "init"))
    assert all(l.rate == 0.0 for l in net.layers if l.kind == "dropout")
    rng = np.random.default_rng(1)
    x = rng.random((8, 8, 2))
    label = 3
    state = net.backward(net.forward(x)[2], label)
    analytic = [g for grads in state.grads for g in grads.values()]

    def loss():
        return float(cross_entropy(net.forward(x)[1], label))

    worst, count = 0.0, 0
    for (_, _, p), g in zip(net.parameters(), analytic):
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + 1e-5
            fp = loss()
            p[idx] = orig - 1e-5
            fm = loss()
            p[idx] = orig
            worst = max(worst, float(rel_err(g[idx], (fp - fm) / 2e-5, floor=1e-7)))
            count += 1

    # per-layer checks against a random linear readout
    layer_worst = 0.0
    conv = Conv2D(rng.standard_normal((3, 3, 3, 2)), rng.standard_normal(3))
    dense = Dense(rng.standard_normal((5, 7)), rng.standard_normal(5))
    cases = [(conv, rng.random((5, 5, 2))), (dense, rng.standard_normal(7)),
             (MaxPool2D(), rng.permutation(36).reshape(6, 6, 1) / 7.0),
             (ReLU(), rng.choice([-1, 1], 10) * rng.uniform(0.1, 1, 10))]
    for layer, inp in cases:
        y, cache = layer.forward(inp)
        w = rng.standard_normal(y.shape)
        gx, grads = layer.backward(cache, w)
        num = central_difference(lambda v: float(np.sum(layer.forward(v)[0] * w)), inp)
        layer_worst = max(layer_worst, float(rel_err(gx, num).max()))
        for name, g in grads.items():
            param = getattr(layer, name)

            def f(v, name=name, param=param):
                saved = param.copy()
                param[...] = v
                out = float(np.sum(layer.forward(inp)[0] * w))
                param[...] = saved
                return out
            layer_worst = max(layer_worst, float(rel_err(g, central_difference(f, param)).max()))
    elapsed = time.perf_counter() - t0
    detail(record_property, f"{count} parameters, worst end-to-end rel err {worst:.2e} (< 1e-4), "
                            f"worst per-layer {layer_worst:.2e} (< 1e-5), {elapsed:.1f} s (< 60 s)")
    assert worst < 1e-4 and layer_worst < 1e-5 and elapsed < 60


@pytest.mark.acceptance(2, "convolution oracle equivalence")
def test_conv_oracle_equivalence(record_property):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    mismatches = 0
    for i in range(50):
        h, w, c = (int(v) for v in rng.integers(1, [10, 10, 5]))
        dtype = np.float32 if i % 2 else np.float64
        x = rng.standard_normal((h, w, c)).astype(dtype)
        kernel = rng.standard_normal((4, 3, 3, c)).astype(dtype)
        bias = rng.standard_normal(4).astype(dtype)
        got, _ = Conv2D(kernel, bias).forward(x)
        mismatches += not np.array_equal(got, conv_loops(x, kernel, bias, 1, 1))
    elapsed = time.perf_counter() - t0
    detail(record_property, f"{50 - mismatches}/50 bit-identical, {elapsed:.2f} s (< 5 s)")
    assert mismatches == 0 and elapsed < 5


@pytest.mark.acceptance(3, "architecture shape audit")
def test_shape_audit(record_property):
    t0 = time.perf_counter()
    prostate = build(paper_preset((128, 128, 16)), stream(0, "init"))
    colorectal = build(paper_preset((128, 60, 42)), stream(0, "init"))
    elapsed = time.perf_counter() - t0
    blocks, fc = NetworkConfig.conv_blocks, NetworkConfig.fc_sizes
    oracle_p = propagate_shape(128, 128, 16, blocks, fc)
    oracle_c = propagate_shape(128, 60, 42, blocks, fc)
    detail(record_property, f"flatten {prostate.flatten_width} / {colorectal.flatten_width} "
                            f"(oracle {oracle_p[0]} / {oracle_c[0]}), {len(prostate.weighted_layers)} weighted "
                            f"layers, {elapsed:.2f} s (< 1 s)")
    assert prostate.flatten_width == oracle_p[0] == 16384
    assert colorectal.flatten_width == oracle_c[0] == 6144
    assert len(prostate.weighted_layers) == len(colorectal.weighted_layers) == oracle_p[1] == 13
    assert elapsed < 1


@pytest.mark.slow
@pytest.mark.acceptance(4, "desk-scale learning")
def test_desk_scale_learning(tmp_path, record_property):
    t0 = time.perf_counter()
    code = main(["cv", "--seed", "7", "--blocks", "8x2,16x2", "--fc", "64,4", "--folds", "5",
                 "--patience", "10", "--lr", DESK_LR, "--batch-size", DESK_BATCH, "--epochs", DESK_EPOCHS,
                 "--workers", str(os.cpu_count() or 1), "--out", str(tmp_path)])
    elapsed = time.perf_counter() - t0
    assert code == 0
    s = json.loads((tmp_path / "summary.json").read_text())
    folds = ", ".join(f"{a:.3f}" for a in s["fold_test_accuracy"])
    detail(record_property, f"mean test accuracy {s['test_accuracy_mean']:.3f} (>= 0.95), "
                            f"SD {s['test_accuracy_sd']:.3f}, folds [{folds}], {elapsed:.0f} s "
                            f"on {os.cpu_count()} core(s) (< 600 s on 4)")
    assert s["test_accuracy_mean"] >= 0.95
    assert math.isfinite(s["test_accuracy_sd"])
    assert elapsed < 600


@pytest.mark.acceptance(5, "augmentation contract")
def test_augmentation_contract(tmp_path, record_property):
    rng = np.random.default_rng(5)
    img = MultispectralImage(rng.random((9, 9, 3)).astype(np.float32))
    fakes = augment(img)
    samples = [Sample(MultispectralImage(rng.random((5, 5, 2))), k, split="train") for k in range(4)]
    labelled = all(s.label == s.source for s in augment_samples(samples, range(4)))
    involutive = all(np.array_equal(flip(flip(img.pixels, f), f), img.pixels) for f in AugmentationPolicy().flips)
    code = main(["cv", "--shape", "8x8x4", "--per-class", "10", "--preset", "tiny", "--folds", "5",
                 "--epochs", "2", "--augment", "--workers", "1", "--out", str(tmp_path)])
    assert code == 0
    s = json.loads((tmp_path / "summary.json").read_text())
    # 40 images, 5 folds: 24 real training images per fold, 27 fakes each
    detail(record_property, f"{len(fakes)} fakes per image, labels kept: {labelled}, flips involutive: {involutive}, "
                            f"fakes per fold {s['augmented_samples']}, leaks into val/test: {s['augmented_leaks']}")
    assert len(fakes) == 27
    assert labelled and involutive
    assert s["augmented_samples"] == [27 * 24] * 5
    assert s["augmented_leaks"] == 0


@pytest.mark.acceptance(6, "Xavier statistics")
def test_xavier_statistics(record_property):
    t0 = time.perf_counter()
    w = xavier_init(InitSpec(144, 288), (10**6,), stream(6, "init"), "float64")
    elapsed = time.perf_counter() - t0
    target = math.sqrt(2 / 432)
    sd_err = abs(w.std() / target - 1)
    mean_z = abs(w.mean()) / (target / math.sqrt(w.size))
    detail(record_property, f"SD {w.std():.6f} vs {target:.6f} ({100 * sd_err:.3f}% off, < 1%), "
                            f"mean at {mean_z:.2f} sigma (< 4), {elapsed:.2f} s (< 5 s)")
    assert sd_err < 0.01 and mean_z < 4 and elapsed < 5


@pytest.mark.acceptance(7, "softmax / cross-entropy identities")
def test_softmax_identities(record_property):
    uniform = float(cross_entropy(softmax(np.full(4, 3.7)), 1))
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        z = rng.standard_normal(4) * 3
        label = int(rng.integers(4))
        num = central_difference(lambda v: float(cross_entropy(softmax(v), label)), z, eps=1e-6)
        worst = max(worst, float(np.abs(num - (softmax(z) - np.eye(4)[label])).max()))
    big = softmax(np.array([1e4, -1e4, 0.0, 1e4]))
    stable = bool(np.all(np.isfinite(big)) and abs(big.sum() - 1) < 1e-12 and abs(big[0] - 0.5) < 1e-12)
    detail(record_property, f"|uniform loss - ln 4| = {abs(uniform - math.log(4)):.1e} (< 1e-9), "
                            f"fused gradient vs finite differences {worst:.1e} (< 1e-7), stable at 1e4: {stable}")
    assert abs(uniform - math.log(4)) < 1e-9 and worst < 1e-7 and stable


@pytest.mark.acceptance(8, "PCA optimality and isometry")
def test_pca(record_property):
    rng = np.random.default_rng(8)
    beaten = 0
    for _ in range(20):
        c = int(rng.integers(3, 9))
        X = rng.standard_normal((80, c)) @ rng.standard_normal((c, c))
        pca = fit_pca([X.reshape(8, 10, c)])
        d = X - pca.mean_spectrum
        best = np.sum((d - d @ pca.components.T @ pca.components) ** 2)
        for _ in range(100):
            q, _ = np.linalg.qr(rng.standard_normal((c, 3)))
            beaten += np.sum((d - d @ q @ q.T) ** 2) < best - 1e-9
    img = rng.random((8, 8, 3))
    P = fit_pca([img]).project(img.reshape(-1, 3))
    X = img.reshape(-1, 3)
    dist_err = np.abs(np.linalg.norm(X[:, None] - X[None], axis=-1)
                      - np.linalg.norm(P[:, None] - P[None], axis=-1)).max()
    big = MultispectralImage(rng.random(COLORECTAL_SHAPE).astype(np.float32))
    reduced = apply_pca(fit_pca([big]), big)
    detail(record_property, f"random projections beating PCA: {beaten}/2000, C=3 distance error {dist_err:.1e} "
                            f"(< 1e-6), 42-channel image reduced to {reduced.shape}")
    assert beaten == 0 and dist_err < 1e-6 and reduced.shape == (128, 60, 3)


@pytest.mark.acceptance(9, "fold laws")
def test_fold_laws(record_property):
    for n in (10, 512, 513):
        labels = np.arange(n) % 4
        assert partition_laws(kfold_split(labels, 10, seed=9), labels, 10)
        assert np.array_equal(fold_assignment(labels, 10, 9), fold_assignment(labels, 10, 9))
    detail(record_property, "n in {10, 512, 513}, k = 10: disjoint, covering, per-class gap <= 1, deterministic")


@pytest.mark.acceptance(10, "early stopping semantics")
def test_early_stopping(tmp_path, record_property):
    net = build(tiny_preset(), stream(10, "init"))
    stopper = EarlyStopping(patience=5)
    hashes = {}
    stopped = None
    for epoch, loss in enumerate([1.0, 0.9, 0.95, 0.96, 0.97, 0.98, 0.99], start=1):
        for _, _, p in net.parameters():
            p -= 0.01 * epoch
        save_checkpoint(net, tmp_path / f"epoch{epoch}.spnw")
        hashes[epoch] = file_sha256(tmp_path / f"epoch{epoch}.spnw")
        if stopper.update(epoch, loss, net):
            stopped = epoch
            break
    stopper.restore(net)
    save_checkpoint(net, tmp_path / "restored.spnw")
    restored = file_sha256(tmp_path / "restored.spnw")
    detail(record_property, f"stopped after epoch {stopped}, best epoch {stopper.best_epoch}, "
                            f"restored checkpoint hash matches epoch 2: {restored == hashes[2]}")
    assert stopped == 7 and stopper.best_epoch == 2 and restored == hashes[2]
    assert len(set(hashes.values())) == 7


@pytest.mark.acceptance(11, "timing harness")
def test_timing_harness(tmp_path, record_property):
    h, w, c = COLORECTAL_SHAPE
    code = main(["bench", "--shape", f"{h}x{w}x{c}", "--per-class", "2", "--preset", "desk", "--folds", "4",
                 "--reps", "100", "--warmup", "10", "--train-epochs", "1", "--out", str(tmp_path)])
    assert code == 0

    def rows(name):
        with open(tmp_path / name) as fh:
            return list(csv.DictReader(fh))
    direct = rows("classification_times_direct.csv")[0]
    pca = rows("classification_times_pca.csv")[0]
    training = rows("training_times.csv")[0]
    d, p = float(direct["per_image_ms"]), float(pca["per_image_ms"])
    detail(record_property, f"direct {d:.3f} ms/image, PCA pipeline {p:.3f} ms/image, "
                            f"training {float(training['time_per_epoch_s']):.3f} s/epoch")
    assert list(direct) == ["method", "dataset", "per_image_ms", "per_image_ms_sd", "repetitions", "warmup"]
    assert list(training) == ["method", "dataset", "time_per_epoch_s", "total_training_s"]
    assert p >= d


@pytest.mark.acceptance(12, "round trips")
def test_round_trips(record_property):
    rng = np.random.default_rng(12)
    ok = {"msi": 0, "checkpoint": 0, "pca": 0}
    for i in range(100):
        h, w, c = (int(v) for v in rng.integers(1, 9, 3))
        bands = tuple(np.cumsum(rng.uniform(1, 30, c)) + 380) if i % 2 else None
        img = MultispectralImage(rng.standard_normal((h, w, c)).astype(np.float32), bands)
        back = decode_msi(encode_msi(img))
        ok["msi"] += (back.pixels.tobytes() == img.pixels.tobytes()
                      and encode_msi(back) == encode_msi(img))

        cfg = tiny_preset((int(rng.integers(4, 9)),) * 2 + (int(rng.integers(1, 4)),),
                          dtype="float64" if i % 2 else "float32", dropout_rates=(0.1, 0.3))
        net = build(cfg, stream(int(rng.integers(2**31)), "init"))
        data = to_bytes(net)
        back_net = from_bytes(data)
        ok["checkpoint"] += (to_bytes(back_net) == data and back_net.config == net.config
                             and all(a.tobytes() == b.tobytes()
                                     for (_, _, a), (_, _, b) in zip(net.parameters(), back_net.parameters())))

        c = int(rng.integers(3, 12))
        f32 = lambda *shape: rng.standard_normal(shape).astype(np.float32).astype(np.float64)
        basis = SpectralPCA(f32(c), f32(3, c), np.abs(f32(3)))
        back_pca = decode_pca(encode_pca(basis))
        ok["pca"] += all(getattr(back_pca, k).tobytes() == getattr(basis, k).tobytes()
                         for k in ("mean_spectrum", "components", "explained_variance"))
    detail(record_property, ", ".join(f"{k} {v}/100 bit-exact" for k, v in ok.items()))
    assert ok == {"msi": 100, "checkpoint": 100, "pca": 100}


def test_checkpoint_file_round_trip(tmp_path):
    net = build(tiny_preset(), stream(0, "init"))
    save_checkpoint(net, tmp_path / "a.spnw")
    save_checkpoint(load_checkpoint(tmp_path / "a.spnw"), tmp_path / "b.spnw")
    assert file_sha256(tmp_path / "a.spnw") == file_sha256(tmp_path / "b.spnw")
