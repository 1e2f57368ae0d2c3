"""Multispectral image container, dataset manifests and synthetic data.

MSI container layout (all little-endian)::

    "MSI1" | version u16 | kind u8 (0 f32, 1 u16) | reserved u8
    | H u32 | W u32 | C u32 | band count u8 | band count x f32 (nm)
    | C planes of H*W scalars, row-major

Manifests are UTF-8 text: a ``#classes,<name>,<name>,...`` header row then
one ``<relative path>,<label>`` row per image.
"""

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import (BadMagicError, ConfigError, DataError, EmptyDatasetError, FormatError,
                     HeterogeneousShapeError, NonFiniteError, PayloadLengthError, TruncatedFileError)
from .rng import stream

MSI_MAGIC = b"MSI1"
MSI_VERSION = 1
KIND_F32 = 0
KIND_U16 = 1
_HEADER = struct.Struct("<4sHBBIIIB")

PROSTATE_CLASSES = ("stroma", "benign_prostatic_hyperplasia",
                    "intraepithelial_neoplasia", "carcinoma")
PROSTATE_SHAPE = (128, 128, 16)
COLORECTAL_SHAPE = (128, 60, 42)


@dataclass
class MultispectralImage:
    pixels: np.ndarray
    bands: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.pixels.ndim != 3 or min(self.pixels.shape) < 1:
            raise DataError(f"image pixels must be H x W x C with C >= 1, got {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise NonFiniteError("image contains non-finite pixel values")
        if self.bands is not None:
            self.bands = tuple(float(b) for b in self.bands)
            if len(self.bands) != self.channels:
                raise DataError(f"{len(self.bands)} band labels for {self.channels} channels")
            if any(nxt <= prev for prev, nxt in zip(self.bands, self.bands[1:])):
                raise DataError("band labels must be strictly increasing")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return self.pixels.shape[2]

    @property
    def shape(self):
        return self.pixels.shape


@dataclass
class Sample:
    """One labelled image.  ``source`` is the index of the real image an
    augmented sample was generated from (``None`` for real samples)."""

    image: MultispectralImage
    label: int
    provenance: str = "real"
    split: Optional[str] = None
    source: Optional[int] = None


@dataclass
class LabeledDataset:
    samples: List[Sample]
    class_names: Tuple[str, ...] = PROSTATE_CLASSES

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        shapes = {s.image.shape for s in self.samples}
        if len(shapes) > 1:
            raise HeterogeneousShapeError(f"dataset mixes image shapes {sorted(shapes)}")
        for s in self.samples:
            if not 0 <= s.label < len(self.class_names):
                raise DataError(f"label {s.label} outside {len(self.class_names)} classes")

    def __len__(self):
        return len(self.samples)

    @property
    def shape(self):
        if not self.samples:
            raise EmptyDatasetError("dataset is empty")
        return self.samples[0].image.shape

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def stack(self, dtype=np.float32) -> np.ndarray:
        return np.stack([s.image.pixels for s in self.samples]).astype(dtype, copy=False)

    def class_counts(self) -> List[int]:
        return np.bincount(self.labels, minlength=len(self.class_names)).tolist()


# --- MSI container ----------------------------------------------------------

def encode_msi(image: MultispectralImage, kind: int = KIND_F32) -> bytes:
    h, w, c = image.shape
    bands = image.bands or ()
    if len(bands) > 255:
        raise FormatError(f"at most 255 band labels can be stored, got {len(bands)}")
    planar = np.transpose(image.pixels, (2, 0, 1))
    if kind == KIND_F32:
        payload = np.ascontiguousarray(planar, dtype="<f4").tobytes()
    elif kind == KIND_U16:
        q = np.clip(np.rint(planar.astype(np.float64) * 65535.0), 0, 65535)
        payload = np.ascontiguousarray(q, dtype="<u2").tobytes()
    else:
        raise ConfigError(f"unknown MSI payload kind {kind}")
    head = _HEADER.pack(MSI_MAGIC, MSI_VERSION, kind, 0, h, w, c, len(bands))
    return head + struct.pack(f"<{len(bands)}f", *bands) + payload


def decode_msi(data: bytes, what: str = "MSI data") -> MultispectralImage:
    if len(data) < 4 or data[:4] != MSI_MAGIC:
        raise BadMagicError(f"{what}: bad magic {data[:4]!r}, expected {MSI_MAGIC!r}")
    if len(data) < _HEADER.size:
        raise TruncatedFileError(f"{what}: header truncated ({len(data)} bytes)")
    _, version, kind, _, h, w, c, nb = _HEADER.unpack_from(data)
    if version != MSI_VERSION:
        raise FormatError(f"{what}: unsupported MSI version {version}")
    if kind not in (KIND_F32, KIND_U16):
        raise FormatError(f"{what}: unknown payload kind {kind}")
    if min(h, w, c) < 1:
        raise FormatError(f"{what}: header declares empty extents {h}x{w}x{c}")
    pos = _HEADER.size
    if len(data) < pos + 4 * nb:
        raise TruncatedFileError(f"{what}: band-label block truncated")
    bands = struct.unpack_from(f"<{nb}f", data, pos) if nb else None
    pos += 4 * nb
    itemsize = 4 if kind == KIND_F32 else 2
    need = h * w * c * itemsize
    have = len(data) - pos
    if have < need:
        raise TruncatedFileError(f"{what}: header claims {h}x{w}x{c} ({need} payload bytes) but only {have} present")
    if have > need:
        raise PayloadLengthError(f"{what}: {have - need} bytes beyond the {h}x{w}x{c} payload")
    raw = np.frombuffer(data, dtype="<f4" if kind == KIND_F32 else "<u2", count=h * w * c, offset=pos)
    planes = raw.reshape(c, h, w)
    if kind == KIND_F32:
        pixels = planes.astype(np.float32)
        if not np.all(np.isfinite(pixels)):
            raise NonFiniteError(f"{what}: payload contains non-finite values")
    else:
        pixels = (planes.astype(np.float64) / 65535.0).astype(np.float32)
    return MultispectralImage(np.ascontiguousarray(pixels.transpose(1, 2, 0)), bands)


def write_msi(path, image: MultispectralImage, kind: int = KIND_F32):
    Path(path).write_bytes(encode_msi(image, kind))


def read_msi(path) -> MultispectralImage:
    return decode_msi(Path(path).read_bytes(), what=str(path))


# --- manifests --------------------------------------------------------------

def write_manifest(path, entries: Sequence[Tuple[str, int]], class_names: Sequence[str]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["#classes", *class_names])
        for rel, label in entries:
            out.writerow([rel, int(label)])


def read_manifest(path) -> Tuple[Tuple[str, ...], List[Tuple[str, int]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(cell.strip() for cell in r)]
    if not rows or rows[0][0] != "#classes":
        raise DataError(f"{path}: first row must be '#classes,<name>,...'")
    names = tuple(rows[0][1:])
    if not names:
        raise DataError(f"{path}: header names no classes")
    entries = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise DataError(f"{path}:{lineno}: expected '<path>,<label>'")
        try:
            label = int(row[1])
        except ValueError:
            raise DataError(f"{path}:{lineno}: label {row[1]!r} is not an integer") from None
        if not 0 <= label < len(names):
            raise DataError(f"{path}:{lineno}: unknown label {label} ({len(names)} classes)")
        entries.append((row[0], label))
    return names, entries


def load_dataset(manifest_path) -> LabeledDataset:
    manifest_path = Path(manifest_path)
    names, entries = read_manifest(manifest_path)
    if not entries:
        raise EmptyDatasetError(f"{manifest_path}: manifest lists no images")
    samples = []
    shape = None
    for rel, label in entries:
        path = manifest_path.parent / rel
        if not path.is_file():
            raise DataError(f"{manifest_path}: missing image file {path}")
        image = read_msi(path)
        if shape is None:
            shape = image.shape
        elif image.shape != shape:
            raise HeterogeneousShapeError(f"{path}: shape {image.shape} differs from {shape}")
        samples.append(Sample(image, label))
    return LabeledDataset(samples, names)


def save_dataset(dataset: LabeledDataset, out_dir, kind: int = KIND_F32, manifest: str = "manifest.csv") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    width = max(4, len(str(len(dataset))))
    for i, s in enumerate(dataset.samples):
        rel = f"img_{i:0{width}d}_c{s.label}.msi"
        write_msi(out_dir / rel, s.image, kind)
        entries.append((rel, s.label))
    path = out_dir / manifest
    write_manifest(path, entries, dataset.class_names)
    return path


# --- synthetic data ---------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Four-class generator standing in for the biopsy collections.

    Per class: a Gaussian spectral bump centred on ``peak_bands[k]``
    multiplied by a sinusoidal texture with ``texture_freqs[k]`` cycles per
    image (random phase and orientation per sample), plus i.i.d. noise.
    """

    shape: Tuple[int, int, int] = (32, 32, 8)
    samples_per_class: int = 64
    noise_sd: Tuple[float, ...] = (0.15, 0.15, 0.15, 0.15)
    peak_bands: Optional[Tuple[float, ...]] = None
    texture_freqs: Tuple[float, ...] = (2.0, 3.0, 4.0, 5.0)
    bump_width: Optional[float] = None
    baseline: float = 0.3
    amplitude: float = 0.4
    seed: int = 7
    class_names: Tuple[str, ...] = PROSTATE_CLASSES

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(v) for v in self.shape))
        noise = self.noise_sd
        if np.isscalar(noise):
            noise = (float(noise),) * 4
        object.__setattr__(self, "noise_sd", tuple(float(v) for v in noise))
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ConfigError(f"synthetic shape must be (H, W, C) with positive extents, got {self.shape}")
        if self.samples_per_class < 1:
            raise ConfigError(f"samples_per_class must be >= 1, got {self.samples_per_class}")
        if len(self.noise_sd) != 4 or min(self.noise_sd) < 0:
            raise ConfigError(f"noise_sd must be four values >= 0, got {self.noise_sd}")
        if len(self.texture_freqs) != 4 or (self.peak_bands is not None and len(self.peak_bands) != 4):
            raise ConfigError("exactly four classes are generated")

    def peaks(self) -> np.ndarray:
        if self.peak_bands is not None:
            return np.asarray(self.peak_bands, dtype=np.float64)
        c = self.shape[2]
        return (np.arange(4) + 0.5) * c / 4.0 - 0.5

    def width(self) -> float:
        return self.bump_width if self.bump_width is not None else max(self.shape[2] / 8.0, 0.5)


def synthetic_image(spec: SyntheticSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    h, w, c = spec.shape
    bands = np.arange(c)
    spectrum = np.exp(-0.5 * ((bands - spec.peaks()[label]) / spec.width()) ** 2)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    angle = rng.uniform(0.0, np.pi)
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    wave = np.sin(2.0 * np.pi * spec.texture_freqs[label] * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
    texture = 0.5 + 0.5 * wave
    img = spec.baseline + spec.amplitude * texture[..., None] * spectrum[None, None, :]
    img = img + rng.normal(0.0, spec.noise_sd[label], size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic(spec: SyntheticSpec) -> LabeledDataset:
    rng = stream(spec.seed, "synthetic")
    samples = []
    for label in range(4):
        for _ in range(spec.samples_per_class):
            samples.append(Sample(MultispectralImage(synthetic_image(spec, label, rng)), label,
                                  provenance="synthetic"))
    return LabeledDataset(samples, spec.class_names)
