"""Training loop, early stopping, k-fold cross-validation and LR grid search."""

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .bench import write_training_times
from .dataio import LabeledDataset, Sample
from .errors import ConfigError, DataError, DivergenceError, EmptyDatasetError, LeakageError
from .network import BackpropState, Network, NetworkConfig, build, cross_entropy, save_checkpoint
from .preprocess import (DEFAULT_ANGLES, AugmentationPolicy, SpectralPCA, apply_pca, augment_samples,
                         fit_pca, save_pca)
from .rng import stream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingConfig:
    lr: float = 1e-4
    max_epochs: int = 100
    # 0 means full batch: one update per epoch
    batch_size: int = 16
    patience: int = 10
    min_delta: float = 1e-6
    k: int = 10
    seed: int = 0
    augment: bool = False
    rotation_angles: Tuple[float, ...] = DEFAULT_ANGLES
    pca: bool = False
    stratified: bool = True
    eval_batch: int = 64
    timing_images: int = 16

    def __post_init__(self):
        object.__setattr__(self, "rotation_angles", tuple(float(a) for a in self.rotation_angles))
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.k < 2:
            raise ConfigError(f"k must be >= 2, got {self.k}")
        if self.batch_size < 0:
            raise ConfigError(f"batch_size must be >= 0, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")

    def replace(self, **changes) -> "TrainingConfig":
        data = asdict(self)
        data.update(changes)
        return TrainingConfig(**data)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainingConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training config key(s): {', '.join(sorted(unknown))}")
        return cls(**data)


# --- folds ------------------------------------------------------------------

@dataclass
class Fold:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def fold_assignment(labels: Sequence[int], k: int, seed: int, stratified: bool = True) -> np.ndarray:
    """Fold id for every sample.

    Stratified: each class is shuffled and dealt round-robin, and the dealer
    carries on where the previous class stopped, so per-class and total fold
    sizes both differ by at most one.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if n < k:
        raise DataError(f"cannot split {n} samples into {k} folds")
    rng = stream(seed, "folds")
    assign = np.empty(n, dtype=np.int64)
    if not stratified:
        order = rng.permutation(n)
        assign[order] = np.arange(n) % k
        return assign
    start = 0
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        assign[idx] = (start + np.arange(idx.size)) % k
        start = (start + idx.size) % k
    return assign


def kfold_split(labels: Sequence[int], k: int, seed: int, stratified: bool = True) -> List[Fold]:
    """Fold ``i`` tests on block ``i`` and validates on block ``i+1 (mod k)``."""
    if k < 3:
        raise ConfigError(f"k={k}: separate validation and test blocks need k >= 3")
    assign = fold_assignment(labels, k, seed, stratified)
    folds = []
    for i in range(k):
        v = (i + 1) % k
        folds.append(Fold(train=np.flatnonzero((assign != i) & (assign != v)),
                          val=np.flatnonzero(assign == v),
                          test=np.flatnonzero(assign == i)))
    return folds


# --- early stopping ---------------------------------------------------------

class EarlyStopping:
    """Keep the parameters of the lowest validation loss seen so far.

    An epoch counts as an improvement only if it beats the best loss by more
    than ``min_delta``; after ``patience`` epochs without one, ``update``
    returns True.  Epochs are numbered from 1.
    """

    def __init__(self, patience: int, min_delta: float = 1e-6):
        self.patience = patience
        self.min_delta = min_delta
        self.best_loss = math.inf
        self.best_epoch = 0
        self.best_params = None
        self.wait = 0

    def update(self, epoch: int, val_loss: float, net: Network) -> bool:
        if val_loss < self.best_loss - self.min_delta:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.best_params = net.snapshot()
            self.wait = 0
        else:
            self.wait += 1
        return self.wait >= self.patience

    def restore(self, net: Network):
        if self.best_params is not None:
            net.restore(self.best_params)


# --- reports ----------------------------------------------------------------

@dataclass
class FoldReport:
    fold: int
    best_epoch: int
    epochs_run: int
    train_loss: List[float]
    val_loss: List[float]
    train_acc: List[float]
    val_acc: List[float]
    val_accuracy: float
    test_accuracy: float
    inference_ms: float
    epoch_seconds: List[float]
    n_train: int
    n_augmented: int = 0
    augmented_sources: List[int] = field(default_factory=list)
    val_indices: List[int] = field(default_factory=list)
    test_indices: List[int] = field(default_factory=list)
    lr: float = 0.0

    @property
    def train_seconds(self) -> float:
        return float(sum(self.epoch_seconds))

    @property
    def leaked(self) -> List[int]:
        held_out = set(self.val_indices) | set(self.test_indices)
        return sorted(held_out.intersection(self.augmented_sources))


def mean_sd(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation (divisor n-1)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ConfigError("no values to aggregate")
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), sd


def percent_string(mean: float, sd: float) -> str:
    """Render as ``mean (SD)`` in percent with one decimal, e.g. ``99.8 (0.1)``."""
    return f"{100 * mean:.1f} ({100 * sd:.1f})"


@dataclass
class RunReport:
    folds: List[FoldReport]
    total_seconds: float
    grid: Optional[Dict[float, float]] = None

    @property
    def test_mean_sd(self):
        return mean_sd([f.test_accuracy for f in self.folds])

    @property
    def val_mean_sd(self):
        return mean_sd([f.val_accuracy for f in self.folds])

    def summary(self) -> dict:
        tm, ts = self.test_mean_sd
        vm, vs = self.val_mean_sd
        return {
            "folds": len(self.folds),
            "test_accuracy": percent_string(tm, ts),
            "validation_accuracy": percent_string(vm, vs),
            "test_accuracy_mean": tm,
            "test_accuracy_sd": ts,
            "validation_accuracy_mean": vm,
            "validation_accuracy_sd": vs,
            "fold_test_accuracy": [f.test_accuracy for f in self.folds],
            "best_epochs": [f.best_epoch for f in self.folds],
            "time_per_epoch_s": float(np.mean([s for f in self.folds for s in f.epoch_seconds])),
            "total_training_s": self.total_seconds,
            "augmented_samples": [f.n_augmented for f in self.folds],
            "augmented_leaks": sum(len(f.leaked) for f in self.folds),
        }


# --- fold training ----------------------------------------------------------

@dataclass
class FoldData:
    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    augmented_sources: List[int]
    pca: Optional[SpectralPCA] = None


def prepare_fold(dataset: LabeledDataset, fold: Fold, cfg: TrainingConfig, dtype=np.float32) -> FoldData:
    """Split, then augment the training portion only, then (optionally) reduce
    every image with a PCA basis fitted on the real training images."""
    for name, idx in (("training", fold.train), ("validation", fold.val)):
        if len(idx) == 0:
            raise EmptyDatasetError(f"{name} split is empty")
    if set(fold.train.tolist()) & (set(fold.val.tolist()) | set(fold.test.tolist())):
        raise DataError("training indices overlap the held-out indices")
    train = [Sample(dataset.samples[i].image, dataset.samples[i].label, split="train") for i in fold.train]
    fakes = []
    if cfg.augment:
        policy = AugmentationPolicy(rotation_angles_deg=cfg.rotation_angles)
        fakes = augment_samples(train, fold.train, policy)
        held_out = set(fold.val.tolist()) | set(fold.test.tolist())
        leaked = held_out.intersection(s.source for s in fakes)
        if leaked:
            raise LeakageError(f"augmented copies of held-out samples {sorted(leaked)}")
    pca = fit_pca([s.image for s in train]) if cfg.pca else None

    channels = 3 if pca else dataset.shape[2]

    def stack(samples):
        X = np.empty((len(samples),) + dataset.shape[:2] + (channels,), dtype=dtype)
        for i, s in enumerate(samples):
            X[i] = apply_pca(pca, s.image).pixels if pca else s.image.pixels
        return X, np.array([s.label for s in samples], dtype=np.int64)

    X_tr, y_tr = stack(train + fakes)
    X_va, y_va = stack([dataset.samples[i] for i in fold.val])
    X_te, y_te = stack([dataset.samples[i] for i in fold.test])
    return FoldData(X_tr, y_tr, X_va, y_va, X_te, y_te, [s.source for s in fakes], pca)


def evaluate(net: Network, X: np.ndarray, y: np.ndarray, batch: int = 64) -> Tuple[float, float]:
    """Mean cross-entropy and top-1 accuracy in inference mode."""
    if len(X) == 0:
        return math.nan, math.nan
    total_loss = 0.0
    correct = 0
    for start in range(0, len(X), batch):
        _, probs, _ = net.forward(X[start:start + batch])
        yb = y[start:start + batch]
        total_loss += float(cross_entropy(probs.astype(np.float64), yb).sum())
        correct += int((probs.argmax(axis=1) == yb).sum())
    return total_loss / len(X), correct / len(X)


def run_epoch(net: Network, X: np.ndarray, y: np.ndarray, cfg: TrainingConfig,
              shuffle_rng, dropout_rng, state: Optional[BackpropState] = None) -> Tuple[float, float]:
    """One pass over the training data; returns the train-mode loss and accuracy."""
    state = state or BackpropState.zeros_like(net)
    n = len(X)
    order = shuffle_rng.permutation(n) if cfg.batch_size else np.arange(n)
    step = cfg.batch_size or cfg.eval_batch
    total_loss = 0.0
    correct = 0
    for start in range(0, n, step):
        idx = order[start:start + step]
        _, probs, cache = net.forward(X[idx], train=True, rng=dropout_rng)
        total_loss += float(cross_entropy(probs.astype(np.float64), y[idx]).sum())
        correct += int((probs.argmax(axis=1) == y[idx]).sum())
        net.backward(cache, y[idx], state)
        if cfg.batch_size:
            net.sgd_step(state, cfg.lr)
    if not cfg.batch_size:
        net.sgd_step(state, cfg.lr)
    return total_loss / n, correct / n


def time_inference(net: Network, X: np.ndarray, limit: int) -> float:
    """Mean milliseconds to classify one image, one image at a time."""
    if len(X) == 0:
        return math.nan
    X = X[:max(limit, 1)]
    net.forward(X[0])
    t0 = time.perf_counter()
    for img in X:
        net.forward(img)
    return 1000.0 * (time.perf_counter() - t0) / len(X)


def fit(net: Network, data: FoldData, cfg: TrainingConfig, fold_index: int = 0) -> FoldReport:
    """Train with early stopping, restore the best weights, score the test set."""
    if len(data.X_train) == 0 or len(data.X_val) == 0:
        raise EmptyDatasetError("training and validation sets must be non-empty")
    shuffle_rng = stream(cfg.seed, "shuffle", fold_index)
    dropout_rng = stream(cfg.seed, "dropout", fold_index)
    stopper = EarlyStopping(cfg.patience, cfg.min_delta)
    state = BackpropState.zeros_like(net)
    curves = {"train_loss": [], "val_loss": [], "train_acc": [], "val_acc": []}
    epoch_seconds = []
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        tr_loss, tr_acc = run_epoch(net, data.X_train, data.y_train, cfg, shuffle_rng, dropout_rng, state)
        epoch_seconds.append(time.perf_counter() - t0)
        va_loss, va_acc = evaluate(net, data.X_val, data.y_val, cfg.eval_batch)
        if not (math.isfinite(tr_loss) and math.isfinite(va_loss)):
            raise DivergenceError(epoch)
        for key, val in zip(curves, (tr_loss, va_loss, tr_acc, va_acc)):
            curves[key].append(val)
        log.debug("fold %d epoch %d: train %.4f/%.3f val %.4f/%.3f",
                  fold_index, epoch, tr_loss, tr_acc, va_loss, va_acc)
        if stopper.update(epoch, va_loss, net):
            break
    stopper.restore(net)
    best = stopper.best_epoch
    _, test_acc = evaluate(net, data.X_test, data.y_test, cfg.eval_batch)
    return FoldReport(
        fold=fold_index, best_epoch=best, epochs_run=len(epoch_seconds),
        val_accuracy=curves["val_acc"][best - 1], test_accuracy=test_acc,
        inference_ms=time_inference(net, data.X_test, cfg.timing_images),
        epoch_seconds=epoch_seconds, n_train=len(data.X_train),
        n_augmented=len(data.augmented_sources), augmented_sources=list(data.augmented_sources),
        lr=cfg.lr, **curves)


def train_fold(net_config: NetworkConfig, dataset: LabeledDataset, fold: Fold, cfg: TrainingConfig,
               fold_index: int = 0) -> Tuple[FoldReport, Network, Optional[SpectralPCA]]:
    data = prepare_fold(dataset, fold, cfg, dtype=np.dtype(net_config.dtype))
    config = net_config.replace(input_shape=data.X_train.shape[1:])
    net = build(config, stream(cfg.seed, "init", fold_index))
    report = fit(net, data, cfg, fold_index)
    report.val_indices = fold.val.tolist()
    report.test_indices = fold.test.tolist()
    return report, net, data.pca


def _fold_job(args):
    net_config, dataset, fold, cfg, i = args
    return train_fold(net_config, dataset, fold, cfg, i)


def _guarded_fold_job(args):
    try:
        return _fold_job(args)
    except DivergenceError:
        return None


def _map(jobs, workers: int, fn=_fold_job):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def run_cv(dataset: LabeledDataset, net_config: NetworkConfig, cfg: TrainingConfig,
           workers: int = 1, out_dir=None) -> RunReport:
    """k-fold cross-validation; results are independent of ``workers``."""
    if len(dataset) == 0:
        raise EmptyDatasetError("dataset is empty")
    folds = kfold_split(dataset.labels, cfg.k, cfg.seed, cfg.stratified)
    t0 = time.perf_counter()
    results = _map([(net_config, dataset, f, cfg, i) for i, f in enumerate(folds)], workers)
    report = RunReport([r for r, _, _ in results], total_seconds=time.perf_counter() - t0)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for fr, net, pca in results:
            save_checkpoint(net, out / f"fold_{fr.fold:02d}_best.spnw")
            if pca is not None:
                save_pca(pca, out / f"fold_{fr.fold:02d}_basis.spca")
        write_run_artifacts(report, out)
    return report


def grid_search(candidates: Sequence[float], dataset: LabeledDataset, net_config: NetworkConfig,
                cfg: TrainingConfig, workers: int = 1) -> Tuple[float, Dict[float, float]]:
    """Train fold 0 once per learning rate (same seed) and keep the best by
    validation accuracy; ties go to the smaller rate."""
    lrs = sorted({float(c) for c in candidates})
    if len(lrs) < 2:
        raise ConfigError(f"grid search needs at least two distinct learning rates, got {list(candidates)}")
    folds = kfold_split(dataset.labels, cfg.k, cfg.seed, cfg.stratified)
    jobs = [(net_config, dataset, folds[0], cfg.replace(lr=lr), 0) for lr in lrs]
    outcomes = _map(jobs, workers, _guarded_fold_job)
    table: Dict[float, float] = {}
    for lr, res in zip(lrs, outcomes):
        table[lr] = math.nan if res is None else res[0].val_accuracy
    return select_learning_rate(table), table


def select_learning_rate(table: Dict[float, float]) -> float:
    finite = {lr: acc for lr, acc in table.items() if math.isfinite(acc)}
    if not finite:
        raise DivergenceError(0, "every learning-rate candidate diverged")
    best = max(finite.values())
    return min(lr for lr, acc in finite.items() if acc == best)


# --- artifacts --------------------------------------------------------------

CURVE_COLUMNS = ("epoch", "train_loss", "val_loss", "train_acc", "val_acc")


def write_curves(report: FoldReport, path):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(CURVE_COLUMNS)
        for e in range(report.epochs_run):
            out.writerow([e + 1, repr(report.train_loss[e]), repr(report.val_loss[e]),
                          repr(report.train_acc[e]), repr(report.val_acc[e])])


def write_grid(table: Dict[float, float], path):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["lr", "val_acc"])
        for lr in sorted(table):
            out.writerow([repr(lr), repr(table[lr])])


def write_run_artifacts(report: RunReport, out_dir, dataset: str = "synthetic"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for fr in report.folds:
        write_curves(fr, out / f"curves_fold_{fr.fold:02d}.csv")
    if report.grid:
        write_grid(report.grid, out / "grid.csv")
    s = report.summary()
    write_training_times([{"method": "proposed_cnn", "dataset": dataset,
                           "time_per_epoch_s": f"{s['time_per_epoch_s']:.6f}",
                           "total_training_s": f"{s['total_training_s']:.6f}"}],
                         out / "training_times.csv")
    (out / "summary.json").write_text(json.dumps(s, indent=2, sort_keys=True) + "\n")
