"""Array helpers on top of ``numpy.ndarray``.

Images are stored as ``(height, width, channels)`` in row-major order; a
leading batch axis is added by the layer code when several images are
processed at once.
"""

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError

DTYPES = {"float32": np.float32, "float64": np.float64}
DEFAULT_DTYPE = "float32"


def resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}, got {dtype!r}")
        return np.dtype(DTYPES[dtype])
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ConfigError(f"unsupported element precision {dt}")
    return dt


def tensor(data, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Build a dense array with validated shape and uniform precision."""
    arr = np.array(data, dtype=resolve_dtype(dtype))
    if arr.ndim == 0 or min(arr.shape) < 1:
        raise DimensionError(f"tensor extents must all be >= 1, got shape {arr.shape}")
    return arr


def matvec(W: np.ndarray, x: np.ndarray) -> np.ndarray:
    if W.ndim != 2 or x.ndim != 1 or W.shape[1] != x.shape[0]:
        raise DimensionError(f"cannot multiply W{W.shape} by x{x.shape}")
    return W @ x


def elementwise(op: Callable, a: np.ndarray, b: Optional[np.ndarray] = None) -> np.ndarray:
    if b is None:
        return np.asarray(op(a), dtype=a.dtype)
    if a.shape != b.shape:
        raise DimensionError(f"elementwise operands differ in shape: {a.shape} vs {b.shape}")
    return np.asarray(op(a, b), dtype=np.result_type(a, b))


def pad_spatial(t: np.ndarray, pad: Sequence, fill: float = 0.0) -> np.ndarray:
    """Pad leading axes by ``(before, after)`` pairs; missing axes are left alone."""
    pad = [tuple(int(v) for v in p) for p in pad]
    if len(pad) > t.ndim:
        raise DimensionError(f"{len(pad)} pad pairs for a rank-{t.ndim} tensor")
    if any(v < 0 for p in pad for v in p):
        raise ConfigError(f"pad counts must be >= 0, got {pad}")
    pad = pad + [(0, 0)] * (t.ndim - len(pad))
    return np.pad(t, pad, mode="constant", constant_values=fill)


def crop_spatial(t: np.ndarray, pad: Sequence) -> np.ndarray:
    """Inverse of :func:`pad_spatial` for the same pad pairs."""
    index = tuple(slice(b, t.shape[i] - a) for i, (b, a) in enumerate(pad))
    return t[index]


def center_pad_amounts(size: int, target: int) -> tuple:
    """Before/after counts that center ``size`` in ``target``; odd pixel goes after."""
    extra = max(int(target) - int(size), 0)
    return extra // 2, extra - extra // 2


def pad_to(t: np.ndarray, height: int, width: int, fill: float = 0.0) -> np.ndarray:
    """Zero-pad an image so it is at least ``height`` x ``width``, content centered."""
    return pad_spatial(t, [center_pad_amounts(t.shape[0], height),
                           center_pad_amounts(t.shape[1], width)], fill)
