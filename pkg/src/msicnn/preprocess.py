"""Flip/rotation augmentation and PCA spectral reduction."""

import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .dataio import MultispectralImage, Sample
from .errors import (BadMagicError, ConfigError, DegenerateSpectrumError, DimensionError,
                     FormatError, LeakageError, PayloadLengthError, TruncatedFileError)
from .tensor import pad_to

FLIPS = ("identity", "horizontal", "vertical", "both")
DEFAULT_ANGLES = (-90, -60, -30, 0, 30, 60, 90)


@dataclass(frozen=True)
class AugmentationPolicy:
    flips: Tuple[str, ...] = FLIPS
    rotation_angles_deg: Tuple[float, ...] = DEFAULT_ANGLES

    def __post_init__(self):
        object.__setattr__(self, "flips", tuple(self.flips))
        object.__setattr__(self, "rotation_angles_deg", tuple(float(a) for a in self.rotation_angles_deg))
        bad = set(self.flips) - set(FLIPS)
        if bad:
            raise ConfigError(f"unknown flip(s) {sorted(bad)}; choose from {FLIPS}")
        if len(set(self.flips)) != len(self.flips) or len(set(self.rotation_angles_deg)) != len(self.rotation_angles_deg):
            raise ConfigError("flips and rotation angles must not repeat")
        if "identity" not in self.flips or 0.0 not in self.rotation_angles_deg:
            raise ConfigError("the policy must contain the identity flip and a 0 degree rotation")

    def transforms(self) -> List[Tuple[str, float]]:
        """Every (flip, angle) pair except the untouched original."""
        return [(f, a) for f in self.flips for a in self.rotation_angles_deg
                if not (f == "identity" and a == 0.0)]


def flip(pixels: np.ndarray, how: str) -> np.ndarray:
    if how == "identity":
        return pixels
    if how == "horizontal":
        return pixels[:, ::-1]
    if how == "vertical":
        return pixels[::-1]
    if how == "both":
        return pixels[::-1, ::-1]
    raise ConfigError(f"unknown flip {how!r}")


def _cos_sin(angle_deg: float) -> Tuple[float, float]:
    if angle_deg % 90 == 0:
        quarter = int(angle_deg // 90) % 4
        return ((1, 0), (0, 1), (-1, 0), (0, -1))[quarter]
    rad = math.radians(angle_deg)
    return math.cos(rad), math.sin(rad)


@lru_cache(maxsize=64)
def _rotation_map(h: int, w: int, angle_deg: float):
    """Source row/col for each output pixel and a validity mask."""
    c, s = _cos_sin(angle_deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    x = jj - cx
    y = cy - ii  # y grows upward so positive angles turn counter-clockwise on screen
    xs = c * x + s * y
    ys = -s * x + c * y
    src_j = np.floor(xs + cx + 0.5).astype(np.intp)
    src_i = np.floor(cy - ys + 0.5).astype(np.intp)
    valid = (src_i >= 0) & (src_i < h) & (src_j >= 0) & (src_j < w)
    return np.where(valid, src_i, 0), np.where(valid, src_j, 0), valid


def rotate(pixels: np.ndarray, angle_deg: float) -> np.ndarray:
    """Nearest-neighbour rotation about the image centre; shape kept, corners
    clipped, uncovered pixels filled with 0."""
    if angle_deg == 0:
        return pixels
    h, w = pixels.shape[:2]
    src_i, src_j, valid = _rotation_map(h, w, float(angle_deg))
    out = pixels[src_i, src_j]
    out[~valid] = 0
    return out


def transform(pixels: np.ndarray, how: str, angle_deg: float) -> np.ndarray:
    return np.ascontiguousarray(rotate(flip(pixels, how), angle_deg))


def augment(image: MultispectralImage, policy: AugmentationPolicy = AugmentationPolicy()) -> List[MultispectralImage]:
    return [MultispectralImage(transform(image.pixels, f, a), image.bands) for f, a in policy.transforms()]


def augment_samples(samples: Sequence[Sample], indices: Sequence[int],
                    policy: AugmentationPolicy = AugmentationPolicy()) -> List[Sample]:
    """Fakes for training samples only; ``indices`` are their dataset indices."""
    out = []
    for idx, s in zip(indices, samples):
        if s.split != "train":
            raise LeakageError(f"sample {idx} is in split {s.split!r}; only training samples may be augmented")
        if s.provenance == "augmented":
            raise LeakageError(f"sample {idx} is already an augmented copy")
        for img in augment(s.image, policy):
            out.append(Sample(img, s.label, provenance="augmented", split="train", source=int(idx)))
    return out


# --- PCA --------------------------------------------------------------------

@dataclass
class SpectralPCA:
    mean_spectrum: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    @property
    def channels(self) -> int:
        return self.mean_spectrum.shape[0]

    def project(self, pixels: np.ndarray) -> np.ndarray:
        return (pixels - self.mean_spectrum) @ self.components.T

    def reconstruct(self, projected: np.ndarray) -> np.ndarray:
        return projected @ self.components + self.mean_spectrum


def jacobi_eigh(a: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Stops when the off-diagonal Frobenius norm falls below ``tol`` times the
    Frobenius norm of the input.  Returns eigenvalues in descending order and
    the matching eigenvectors as columns.
    """
    A = np.array(a, dtype=np.float64)
    n = A.shape[0]
    if A.shape != (n, n):
        raise DimensionError(f"expected a square matrix, got {A.shape}")
    V = np.eye(n)
    limit = tol * max(np.linalg.norm(A), np.finfo(float).tiny)
    for _ in range(max_sweeps):
        off = math.sqrt(max(np.sum(A * A) - np.sum(np.diag(A) ** 2), 0.0))
        if off < limit:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                diff = A[q, q] - A[p, p]
                if abs(apq) < 1e-300 or abs(diff) + 100.0 * abs(apq) == abs(diff):
                    t = apq / diff  # tiny angle; avoids overflowing tau
                else:
                    tau = diff / (2.0 * apq)
                    t = math.copysign(1.0, tau) / (abs(tau) + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                colp, colq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * colp - s * colq
                A[:, q] = s * colp + c * colq
                rowp, rowq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * rowp - s * rowq
                A[q, :] = s * rowp + c * rowq
                A[p, q] = A[q, p] = 0.0
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    values = np.diag(A).copy()
    order = np.argsort(-values, kind="stable")
    return values[order], V[:, order]


def _pixel_rows(images) -> List[np.ndarray]:
    rows = []
    for img in images:
        pix = img.pixels if isinstance(img, MultispectralImage) else np.asarray(img)
        rows.append(pix.reshape(-1, pix.shape[-1]).astype(np.float64))
    return rows


def fit_pca(training_images, n_components: int = 3) -> SpectralPCA:
    """Top principal directions of the pixelwise spectral covariance.

    Every pixel of every image is one sample; the covariance uses divisor n.
    """
    rows = _pixel_rows(training_images)
    if not rows:
        raise DegenerateSpectrumError("no images to fit")
    c = rows[0].shape[1]
    if any(r.shape[1] != c for r in rows):
        raise DimensionError("images differ in channel count")
    if c < n_components:
        raise DimensionError(f"cannot keep {n_components} components of {c} channels")
    n = sum(r.shape[0] for r in rows)
    if n < 4:
        raise DegenerateSpectrumError(f"need at least 4 pixels, got {n}")
    mean = sum(r.sum(axis=0) for r in rows) / n
    cov = np.zeros((c, c))
    for r in rows:
        d = r - mean
        cov += d.T @ d
    cov /= n
    if np.trace(cov) <= 0.0:
        raise DegenerateSpectrumError("all pixels share one spectrum; covariance is zero")
    values, vectors = jacobi_eigh(cov)
    comps = vectors[:, :n_components].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return SpectralPCA(mean, comps, np.maximum(values[:n_components], 0.0))


def apply_pca(pca: SpectralPCA, image: MultispectralImage) -> MultispectralImage:
    if image.channels != pca.channels:
        raise DimensionError(f"image has {image.channels} channels, basis was fitted on {pca.channels}")
    out = pca.project(image.pixels.astype(np.float64))
    return MultispectralImage(out.astype(np.float32))


def pad_image(image: MultispectralImage, min_height: int, min_width: int) -> MultispectralImage:
    """Zero-pad to a minimum spatial size with the content centred."""
    return MultispectralImage(pad_to(image.pixels, min_height, min_width), image.bands)


PCA_MAGIC = b"SPCA"


def encode_pca(pca: SpectralPCA) -> bytes:
    c = pca.channels
    if pca.components.shape != (3, c) or pca.explained_variance.shape != (3,):
        raise FormatError("basis files hold exactly 3 components")
    return (PCA_MAGIC + struct.pack("<I", c)
            + np.asarray(pca.mean_spectrum, dtype="<f4").tobytes()
            + np.asarray(pca.components, dtype="<f4").tobytes()
            + np.asarray(pca.explained_variance, dtype="<f4").tobytes())


def decode_pca(data: bytes, what: str = "PCA basis") -> SpectralPCA:
    if data[:4] != PCA_MAGIC:
        raise BadMagicError(f"{what}: bad magic {data[:4]!r}")
    if len(data) < 8:
        raise TruncatedFileError(f"{what}: header truncated")
    (c,) = struct.unpack_from("<I", data, 4)
    need = 8 + 4 * (c + 3 * c + 3)
    if len(data) < need:
        raise TruncatedFileError(f"{what}: expected {need} bytes, got {len(data)}")
    if len(data) > need:
        raise PayloadLengthError(f"{what}: {len(data) - need} trailing bytes")
    vals = np.frombuffer(data, dtype="<f4", offset=8).astype(np.float64)
    return SpectralPCA(vals[:c].copy(), vals[c:4 * c].reshape(3, c).copy(), vals[4 * c:].copy())


def save_pca(pca: SpectralPCA, path):
    Path(path).write_bytes(encode_pca(pca))


def load_pca(path) -> SpectralPCA:
    return decode_pca(Path(path).read_bytes(), what=str(path))
