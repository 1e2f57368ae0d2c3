"""Command-line entry point.

Run specs are JSON files (``schema_version`` 1); every value in them can be
overridden by a flag, and flags win.  Exit codes: 0 success, 2 usage,
3 data/format, 4 divergence, 5 I/O.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import bench
from .dataio import (KIND_F32, KIND_U16, LabeledDataset, Sample, SyntheticSpec, generate_synthetic,
                     load_dataset, save_dataset, write_manifest, write_msi)
from .errors import ConfigError, DataError, DivergenceError
from .network import build, desk_preset, load_checkpoint, paper_preset, save_checkpoint, tiny_preset
from .preprocess import AugmentationPolicy, apply_pca, augment, fit_pca, load_pca, save_pca
from .rng import stream
from .trainer import (Fold, TrainingConfig, evaluate, grid_search, kfold_split, run_cv,
                      train_fold, write_curves, write_grid)

log = logging.getLogger("msicnn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4, 5
SCHEMA_VERSION = 1
PRESETS = {"paper": paper_preset, "tiny": tiny_preset, "desk": desk_preset}
SPEC_KEYS = {"schema_version", "data", "output_dir", "seed", "workers", "network", "training", "grid"}


class UsageError(ConfigError):
    pass


# --- argument parsing -------------------------------------------------------

def _shape(text):
    try:
        parts = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxWxC, got {text!r}") from None
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"expected three positive extents HxWxC, got {text!r}")
    return parts


def _blocks(text):
    try:
        return tuple(tuple(int(v) for v in item.split("x")) for item in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected FILTERSxLAYERS,... got {text!r}") from None


def _ints(text):
    return tuple(int(v) for v in text.split(","))


def _floats(text):
    return tuple(float(v) for v in text.split(","))


def _add_common(p, data=True):
    p.add_argument("--spec", type=Path, help="JSON run spec (flags override its values)")
    p.add_argument("--out", type=Path, help="output directory (default: spec output_dir or ./run)")
    p.add_argument("--seed", type=int, help="top-level seed for every random stream (default: 0)")
    p.add_argument("--workers", type=int,
                   help=f"parallel fold workers (default: logical cores = {os.cpu_count()})")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress (default: off)")
    if data:
        g = p.add_argument_group("data (a manifest, or synthetic generation)")
        g.add_argument("--manifest", type=Path, help="dataset manifest (default: synthetic data)")
        g.add_argument("--shape", type=_shape, help="synthetic HxWxC (default: 32x32x8)")
        g.add_argument("--per-class", type=int, help="synthetic samples per class (default: 64)")
        g.add_argument("--noise", type=float, help="synthetic noise SD (default: 0.15)")
        g.add_argument("--data-seed", type=int, help="synthetic data seed (default: --seed)")


def _add_model(p):
    g = p.add_argument_group("network")
    g.add_argument("--preset", choices=sorted(PRESETS), help="architecture preset (default: desk)")
    g.add_argument("--blocks", type=_blocks, help="conv blocks as FILTERSxLAYERS,... e.g. 8x2,16x2")
    g.add_argument("--fc", type=_ints, help="dense layer sizes e.g. 64,4")
    g.add_argument("--dropout", type=_floats, help="dropout rates POOL,FC (default: 0.25,0.5)")
    g.add_argument("--dtype", choices=["float32", "float64"], help="element precision (default: float32)")
    t = p.add_argument_group("training")
    t.add_argument("--lr", type=float, help=f"learning rate (default: {TrainingConfig.lr})")
    t.add_argument("--epochs", type=int, help=f"maximum epochs (default: {TrainingConfig.max_epochs})")
    t.add_argument("--batch-size", type=int,
                   help=f"mini-batch size, 0 for full batch (default: {TrainingConfig.batch_size})")
    t.add_argument("--patience", type=int, help=f"early-stopping patience (default: {TrainingConfig.patience})")
    t.add_argument("--folds", type=int, help=f"number of folds k (default: {TrainingConfig.k})")
    t.add_argument("--augment", action=argparse.BooleanOptionalAction, help="flip/rotate training images (default: off)")
    t.add_argument("--pca", action=argparse.BooleanOptionalAction, help="reduce to 3 PCA channels (default: off)")
    t.add_argument("--stratified", action=argparse.BooleanOptionalAction, help="stratify folds by class (default: on)")


def make_parser():
    parser = argparse.ArgumentParser(prog="msicnn", description="Multispectral CNN training and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic dataset")
    p.add_argument("--shape", type=_shape, default=(32, 32, 8), help="HxWxC (default: 32x32x8)")
    p.add_argument("--per-class", type=int, default=64, help="samples per class (default: 64)")
    p.add_argument("--noise", type=float, default=0.15, help="noise SD (default: 0.15)")
    p.add_argument("--seed", type=int, default=7, help="seed (default: 7)")
    p.add_argument("--kind", choices=["f32", "u16"], default="f32", help="payload type (default: f32)")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("augment", help="write the flipped/rotated fakes of every image in a manifest")
    p.add_argument("--manifest", type=Path, required=True, help="manifest of training images only")
    p.add_argument("--angles", type=_floats, default=None, help="rotation angles in degrees (default: -90,-60,-30,0,30,60,90)")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("pca", help="fit a 3-component spectral basis and write reduced images")
    p.add_argument("--manifest", type=Path, required=True, help="manifest of images to fit on")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("train", help="train one model with early stopping")
    _add_common(p)
    _add_model(p)
    p.add_argument("--fold", type=int, default=0, help="fold to train when splitting (default: 0)")
    p.add_argument("--val-manifest", type=Path, help="validation manifest; trains on all of --manifest")

    p = sub.add_parser("cv", help="k-fold cross-validation")
    _add_common(p)
    _add_model(p)

    p = sub.add_parser("grid", help="learning-rate grid search on fold 0")
    _add_common(p)
    _add_model(p)
    p.add_argument("--lrs", type=_floats, help="candidates (default: 1e-2,1e-3,1e-4,1e-5)")

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a manifest")
    p.add_argument("--checkpoint", type=Path, required=True, help="network checkpoint (.spnw)")
    p.add_argument("--manifest", type=Path, required=True, help="images to classify")
    p.add_argument("--pca-basis", type=Path, help="basis file if the network was trained on PCA channels")
    p.add_argument("--out", type=Path, help="write eval.json here (default: print only)")

    p = sub.add_parser("bench", help="per-image classification and training timings")
    _add_common(p)
    _add_model(p)
    p.add_argument("--pipeline", choices=["direct", "pca", "both"], default="both",
                   help="pipeline(s) to time (default: both)")
    p.add_argument("--checkpoint", type=Path, help="network to time (default: freshly initialised)")
    p.add_argument("--reps", type=int, default=100, help="measured repetitions (default: 100)")
    p.add_argument("--warmup", type=int, default=10, help="warm-up repetitions (default: 10)")
    p.add_argument("--train-epochs", type=int, default=2, help="epochs timed for the training table (default: 2)")
    return parser


# --- run spec resolution ----------------------------------------------------

def load_spec(path):
    if path is None:
        return {}, Path.cwd()
    try:
        spec = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(spec, dict):
        raise UsageError(f"{path}: top level must be an object")
    unknown = set(spec) - SPEC_KEYS
    if unknown:
        raise UsageError(f"{path}: unknown key(s) {', '.join(sorted(unknown))}")
    if spec.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise UsageError(f"{path}: schema_version {spec['schema_version']} is not supported")
    return spec, Path(path).parent


def resolve(args, spec, base):
    """Merge spec and flags into (dataset, NetworkConfig, TrainingConfig, out, workers, seed)."""
    seed = args.seed if args.seed is not None else spec.get("seed", 0)
    workers = args.workers or spec.get("workers") or os.cpu_count() or 1
    out = args.out or (base / spec["output_dir"] if "output_dir" in spec else Path("run"))

    data = dict(spec.get("data", {}))
    unknown = set(data) - {"manifest", "synthetic"}
    if unknown:
        raise UsageError(f"data: unknown key(s) {', '.join(sorted(unknown))}")
    manifest = args.manifest or (base / data["manifest"] if "manifest" in data else None)
    if manifest is not None and (args.shape or args.per_class or args.noise is not None):
        raise UsageError("--manifest cannot be combined with synthetic data flags")
    if manifest is not None:
        dataset = load_dataset(manifest)
    else:
        syn = dict(data.get("synthetic", {}))
        syn.setdefault("seed", seed)
        for key, flag in (("shape", args.shape), ("samples_per_class", args.per_class),
                          ("noise_sd", args.noise), ("seed", args.data_seed)):
            if flag is not None:
                syn[key] = flag
        try:
            dataset = generate_synthetic(SyntheticSpec(**syn))
        except TypeError as exc:
            raise UsageError(f"data.synthetic: {exc}") from None

    net = dict(spec.get("network", {}))
    preset = args.preset or net.pop("preset", "desk")
    net.pop("preset", None)
    if preset not in PRESETS:
        raise UsageError(f"network.preset: unknown preset {preset!r}")
    for key, flag in (("conv_blocks", args.blocks), ("fc_sizes", args.fc),
                      ("dropout_rates", args.dropout), ("dtype", args.dtype)):
        if flag is not None:
            net[key] = flag
    if "fc_sizes" in net:
        net.setdefault("class_count", list(net["fc_sizes"])[-1])
    try:
        net_config = PRESETS[preset](input_shape=dataset.shape, **net)
    except TypeError as exc:
        raise UsageError(f"network: {exc}") from None

    train = dict(spec.get("training", {}))
    train["seed"] = seed
    for key, flag in (("lr", args.lr), ("max_epochs", args.epochs), ("batch_size", args.batch_size),
                      ("patience", args.patience), ("k", args.folds), ("augment", args.augment),
                      ("pca", args.pca), ("stratified", args.stratified)):
        if flag is not None:
            train[key] = flag
    cfg = TrainingConfig.from_dict(train)
    return dataset, net_config, cfg, Path(out), workers, seed


# --- commands ---------------------------------------------------------------

def cmd_gen(args):
    if args.per_class < 1:
        raise UsageError("--per-class must be >= 1")
    if args.noise < 0:
        raise UsageError("--noise must be >= 0")
    ds = generate_synthetic(SyntheticSpec(shape=args.shape, samples_per_class=args.per_class,
                                          noise_sd=args.noise, seed=args.seed))
    save_dataset(ds, args.out, KIND_U16 if args.kind == "u16" else KIND_F32)
    h, w, c = ds.shape
    print(f"wrote {len(ds)} samples of shape {h}x{w}x{c} to {args.out}")


def cmd_augment(args):
    ds = load_dataset(args.manifest)
    policy = AugmentationPolicy(rotation_angles_deg=args.angles) if args.angles else AugmentationPolicy()
    args.out.mkdir(parents=True, exist_ok=True)
    entries = []
    names = [f"{f}_{int(a) if a == int(a) else a}" for f, a in policy.transforms()]
    for i, s in enumerate(ds.samples):
        for name, img in zip(names, augment(s.image, policy)):
            rel = f"src{i:04d}_{name}.msi"
            write_msi(args.out / rel, img)
            entries.append((rel, s.label))
    write_manifest(args.out / "manifest.csv", entries, ds.class_names)
    print(f"wrote {len(entries)} augmented images ({len(policy.transforms())} per source) to {args.out}")


def cmd_pca(args):
    ds = load_dataset(args.manifest)
    pca = fit_pca([s.image for s in ds.samples])
    args.out.mkdir(parents=True, exist_ok=True)
    save_pca(pca, args.out / "basis.spca")
    reduced = LabeledDataset([Sample(apply_pca(pca, s.image), s.label) for s in ds.samples], ds.class_names)
    save_dataset(reduced, args.out)
    ev = ", ".join(f"{v:.4g}" for v in pca.explained_variance)
    print(f"fitted {pca.channels}->3 basis (explained variance {ev}); wrote {len(ds)} images to {args.out}")


def cmd_cv(args):
    spec, base = load_spec(args.spec)
    dataset, net_config, cfg, out, workers, _ = resolve(args, spec, base)
    report = run_cv(dataset, net_config, cfg, workers=workers, out_dir=out)
    s = report.summary()
    print(f"{cfg.k}-fold test accuracy, mean (SD) %: {s['test_accuracy']}; "
          f"validation: {s['validation_accuracy']}; wrote {out}")


def cmd_train(args):
    spec, base = load_spec(args.spec)
    dataset, net_config, cfg, out, _, _ = resolve(args, spec, base)
    if args.val_manifest is not None:
        val = load_dataset(args.val_manifest)
        if val.shape != dataset.shape:
            raise DataError(f"{args.val_manifest}: shape {val.shape} differs from training shape {dataset.shape}")
        n, m = len(dataset), len(val)
        dataset = LabeledDataset(dataset.samples + val.samples, dataset.class_names)
        held = np.arange(n, n + m)
        fold = Fold(train=np.arange(n), val=held, test=held)
    else:
        folds = kfold_split(dataset.labels, cfg.k, cfg.seed, cfg.stratified)
        if not 0 <= args.fold < len(folds):
            raise UsageError(f"--fold must lie in [0, {len(folds)})")
        fold = folds[args.fold]
    report, net, pca = train_fold(net_config, dataset, fold, cfg, args.fold)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, out / "best.spnw")
    if pca is not None:
        save_pca(pca, out / "basis.spca")
    write_curves(report, out / "curves.csv")
    summary = {"best_epoch": report.best_epoch, "epochs_run": report.epochs_run,
               "validation_accuracy": report.val_accuracy, "test_accuracy": report.test_accuracy,
               "final_train_accuracy": report.train_acc[-1], "inference_ms": report.inference_ms,
               "time_per_epoch_s": float(np.mean(report.epoch_seconds)), "total_training_s": report.train_seconds}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"best epoch {report.best_epoch}/{report.epochs_run}; test accuracy {report.test_accuracy:.4f}; wrote {out}")


def cmd_grid(args):
    spec, base = load_spec(args.spec)
    dataset, net_config, cfg, out, workers, _ = resolve(args, spec, base)
    lrs = args.lrs or tuple(spec.get("grid", {}).get("candidates", (1e-2, 1e-3, 1e-4, 1e-5)))
    best, table = grid_search(lrs, dataset, net_config, cfg, workers=workers)
    out.mkdir(parents=True, exist_ok=True)
    write_grid(table, out / "grid.csv")
    (out / "summary.json").write_text(json.dumps({"best_lr": best, "table": {repr(k): v for k, v in table.items()}},
                                                 indent=2, sort_keys=True) + "\n")
    for lr in sorted(table):
        print(f"lr={lr:g}\tval_acc={table[lr]:.4f}")
    print(f"best lr {best:g}; wrote {out}")


def cmd_eval(args):
    net = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.manifest)
    X = ds.stack(net.dtype)
    if args.pca_basis is not None:
        pca = load_pca(args.pca_basis)
        X = np.stack([apply_pca(pca, s.image).pixels for s in ds.samples]).astype(net.dtype)
    if X.shape[1:] != net.config.input_shape:
        raise DataError(f"{args.manifest}: images {X.shape[1:]} do not fit network input {net.config.input_shape}")
    loss, acc = evaluate(net, X, ds.labels)
    result = {"accuracy": acc, "loss": loss, "images": len(ds)}
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "eval.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(f"accuracy {acc:.4f} on {len(ds)} images (loss {loss:.4f})")


def cmd_bench(args):
    spec, base = load_spec(args.spec)
    dataset, net_config, cfg, out, _, seed = resolve(args, spec, base)
    pipelines = ("direct", "pca") if args.pipeline == "both" else (args.pipeline,)
    images = [s.image for s in dataset.samples]
    pca = fit_pca(images) if "pca" in pipelines else None
    if args.checkpoint is not None:
        net = load_checkpoint(args.checkpoint)
    else:
        h, w, c = dataset.shape
        # one network for every pipeline: it consumes PCA channels whenever PCA is timed
        shape = (h, w, 3) if pca is not None else (h, w, c)
        net = build(net_config.replace(input_shape=shape), stream(seed, "init"))
    records = bench.compare(net, images, pipelines, pca, args.warmup, args.reps)
    out.mkdir(parents=True, exist_ok=True)
    label = "x".join(map(str, dataset.shape))
    for p, rec in records.items():
        bench.write_classification_times([rec], out / f"classification_times_{p}.csv", label)
        print(f"{p}: {rec.per_image_ms:.3f} ms/image (SD {rec.per_image_ms_sd:.3f}, {rec.repetitions} reps)")
    if args.train_epochs > 0:
        tcfg = cfg.replace(max_epochs=args.train_epochs, patience=args.train_epochs + 1,
                           pca=pca is not None and args.checkpoint is None)
        folds = kfold_split(dataset.labels, cfg.k, cfg.seed, cfg.stratified)
        report, _, _ = train_fold(net_config, dataset, folds[0], tcfg, 0)
        bench.write_training_times([{"method": "proposed_cnn", "dataset": label,
                                     "time_per_epoch_s": f"{np.mean(report.epoch_seconds):.6f}",
                                     "total_training_s": f"{report.train_seconds:.6f}"}],
                                   out / "training_times.csv")
        print(f"training: {np.mean(report.epoch_seconds):.3f} s/epoch over {report.epochs_run} epochs")
    print(f"wrote {out}")


COMMANDS = {"gen": cmd_gen, "augment": cmd_augment, "pca": cmd_pca, "train": cmd_train, "cv": cmd_cv,
            "grid": cmd_grid, "eval": cmd_eval, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"msicnn {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"msicnn {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"msicnn {args.command}: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"msicnn {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
