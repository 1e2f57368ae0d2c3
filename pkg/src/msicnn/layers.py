"""Layer kinds used by the network: forward and backward passes.

All layers work on a leading batch axis: images are ``(N, H, W, C)`` and
vectors ``(N, D)``.  An unbatched input is accepted and the batch axis is
dropped again on the way out.  ``forward`` returns ``(output, cache)``;
``backward(cache, grad_out)`` returns ``(grad_input, param_grads)`` with the
parameter gradients summed over the batch.  Caches are plain objects owned by
the caller, so a layer can be evaluated by several workers at once.
"""

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import ConfigError, DimensionError


def _batched(x: np.ndarray, rank: int) -> Tuple[np.ndarray, bool]:
    if x.ndim == rank - 1:
        return x[None], True
    if x.ndim != rank:
        raise DimensionError(f"expected a rank-{rank - 1} or rank-{rank} input, got shape {x.shape}")
    return x, False


def _unbatch(x: np.ndarray, single: bool) -> np.ndarray:
    return x[0] if single else x


class Layer:
    kind = "layer"

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return {}

    def output_shape(self, shape: tuple) -> tuple:
        return shape

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, cache, grad):
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind}


class Conv2D(Layer):
    """Cross-correlation of ``(F, k, k, C)`` filters with a zero-padded input.

    The forward pass accumulates one ``(tap_row, tap_col, channel)`` product
    at a time in row-major tap order and adds the bias last, which is the
    same summation order as the obvious six-loop implementation.  Results are
    therefore bit-identical to that reference, not merely close.
    """

    kind = "conv"

    def __init__(self, kernel: np.ndarray, bias: np.ndarray, stride: int = 1, zero_pad: int = 1):
        if kernel.ndim != 4 or kernel.shape[1] != kernel.shape[2]:
            raise DimensionError(f"kernel must be (filters, k, k, channels), got {kernel.shape}")
        if bias.shape != (kernel.shape[0],):
            raise DimensionError(f"bias shape {bias.shape} does not match {kernel.shape[0]} filters")
        if stride < 1 or zero_pad < 0:
            raise ConfigError(f"stride must be >= 1 and zero_pad >= 0 (got {stride}, {zero_pad})")
        self.kernel = kernel
        self.bias = bias
        self.stride = int(stride)
        self.zero_pad = int(zero_pad)

    @property
    def params(self):
        return {"kernel": self.kernel, "bias": self.bias}

    @property
    def filters(self):
        return self.kernel.shape[0]

    @property
    def size(self):
        return self.kernel.shape[1]

    @property
    def in_channels(self):
        return self.kernel.shape[3]

    def _extent(self, n: int) -> int:
        span = n + 2 * self.zero_pad - self.size
        if span < 0 or span % self.stride:
            raise DimensionError(
                f"conv output extent ({n} + 2*{self.zero_pad} - {self.size})/{self.stride} + 1 is not a positive integer")
        return span // self.stride + 1

    def output_shape(self, shape):
        h, w, c = shape
        if c != self.in_channels:
            raise DimensionError(f"input has {c} channels, kernel expects {self.in_channels}")
        return self._extent(h), self._extent(w), self.filters

    def _window(self, xp, i, j, ho, wo):
        s = self.stride
        return xp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :]

    def forward(self, x, train=False, rng=None):
        x, single = _batched(x, 4)
        ho, wo, _ = self.output_shape(x.shape[1:])
        p = self.zero_pad
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        dtype = np.result_type(x, self.kernel)
        # channel-major copy keeps each accumulation step a contiguous broadcast
        xc = np.ascontiguousarray(xp.transpose(3, 0, 1, 2))
        acc = np.zeros((self.filters, x.shape[0], ho, wo), dtype=dtype)
        tmp = np.empty_like(acc)
        s = self.stride
        for i in range(self.size):
            for j in range(self.size):
                win = xc[:, None, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
                taps = self.kernel[:, i, j, :, None, None, None]
                for c in range(self.in_channels):
                    np.multiply(win[c], taps[:, c], out=tmp)
                    acc += tmp
        out = np.empty((x.shape[0], ho, wo, self.filters), dtype=dtype)
        np.add(acc.transpose(1, 2, 3, 0), self.bias, out=out)
        return _unbatch(out, single), (xp, x.shape, single)

    def backward(self, cache, grad):
        xp, in_shape, single = cache
        grad, _ = _batched(grad, 4)
        n, ho, wo, f = grad.shape
        if (n, ho, wo) != (in_shape[0], self._extent(in_shape[1]), self._extent(in_shape[2])) or f != self.filters:
            raise DimensionError(f"grad_out shape {grad.shape} does not match the forward output")
        gk = np.empty_like(self.kernel, dtype=np.result_type(grad, self.kernel))
        gxp = np.zeros(xp.shape, dtype=gk.dtype)
        s = self.stride
        for i in range(self.size):
            for j in range(self.size):
                win = self._window(xp, i, j, ho, wo)
                gk[:, i, j, :] = np.tensordot(grad, win, axes=([0, 1, 2], [0, 1, 2]))
                gxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += grad @ self.kernel[:, i, j, :]
        gb = grad.sum(axis=(0, 1, 2))
        p = self.zero_pad
        gx = gxp[:, p:p + in_shape[1], p:p + in_shape[2], :]
        return _unbatch(gx, single), {"kernel": gk, "bias": gb}

    def describe(self):
        return {"kind": self.kind, "filters": self.filters, "size": self.size,
                "stride": self.stride, "zero_pad": self.zero_pad}


class MaxPool2D(Layer):
    """Non-overlapping max pooling; trailing rows/columns that do not fill a
    window are dropped, and ties go to the first position in row-major order."""

    kind = "maxpool"

    def __init__(self, window: int = 2):
        if window < 1:
            raise ConfigError(f"pool window must be >= 1, got {window}")
        self.window = int(window)

    def output_shape(self, shape):
        h, w, c = shape
        p = self.window
        if h < p or w < p:
            raise DimensionError(f"cannot pool a {h}x{w} plane with a {p}x{p} window")
        return h // p, w // p, c

    def forward(self, x, train=False, rng=None):
        x, single = _batched(x, 4)
        n, h, w, c = x.shape
        ho, wo, _ = self.output_shape((h, w, c))
        p = self.window
        blocks = (x[:, :ho * p, :wo * p, :]
                  .reshape(n, ho, p, wo, p, c)
                  .transpose(0, 1, 3, 5, 2, 4)
                  .reshape(n, ho, wo, c, p * p))
        argmax = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
        return _unbatch(out, single), (argmax, x.shape, single)

    def backward(self, cache, grad):
        if cache is None:
            raise ConfigError("maxpool backward called before any forward pass")
        argmax, in_shape, single = cache
        grad, _ = _batched(grad, 4)
        if grad.shape != argmax.shape:
            raise DimensionError(f"grad_out shape {grad.shape} does not match pooled shape {argmax.shape}")
        n, h, w, c = in_shape
        ho, wo = argmax.shape[1:3]
        p = self.window
        blocks = np.zeros(argmax.shape + (p * p,), dtype=grad.dtype)
        np.put_along_axis(blocks, argmax[..., None], grad[..., None], axis=-1)
        gx = np.zeros(in_shape, dtype=grad.dtype)
        gx[:, :ho * p, :wo * p, :] = (blocks.reshape(n, ho, wo, c, p, p)
                                      .transpose(0, 1, 4, 2, 5, 3)
                                      .reshape(n, ho * p, wo * p, c))
        return _unbatch(gx, single), {}

    def describe(self):
        return {"kind": self.kind, "window": self.window}


class Dense(Layer):
    kind = "dense"

    def __init__(self, W: np.ndarray, b: np.ndarray):
        if W.ndim != 2 or b.shape != (W.shape[0],):
            raise DimensionError(f"dense weights {W.shape} and bias {b.shape} are inconsistent")
        self.W = W
        self.b = b

    @property
    def params(self):
        return {"W": self.W, "b": self.b}

    def output_shape(self, shape):
        if shape != (self.W.shape[1],):
            raise DimensionError(f"dense layer expects {self.W.shape[1]} inputs, got shape {shape}")
        return (self.W.shape[0],)

    def forward(self, x, train=False, rng=None):
        x, single = _batched(x, 2)
        if x.shape[1] != self.W.shape[1]:
            raise DimensionError(f"cannot apply W{self.W.shape} to input of width {x.shape[1]}")
        return _unbatch(x @ self.W.T + self.b, single), (x, single)

    def backward(self, cache, grad):
        x, single = cache
        grad, _ = _batched(grad, 2)
        if grad.shape != (x.shape[0], self.W.shape[0]):
            raise DimensionError(f"grad_out shape {grad.shape} does not match the forward output")
        return _unbatch(grad @ self.W, single), {"W": grad.T @ x, "b": grad.sum(axis=0)}

    def describe(self):
        return {"kind": self.kind, "in": self.W.shape[1], "out": self.W.shape[0]}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, rng=None):
        return np.maximum(x, 0), x > 0

    def backward(self, cache, grad):
        # subgradient 0 at exactly 0
        return grad * cache, {}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, train=False, rng=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, grad):
        return grad.reshape(cache), {}


@dataclass
class DropoutCache:
    mask: Optional[np.ndarray]
    scale: float


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by ``1/(1-rate)`` while
    training so that inference is the identity."""

    kind = "dropout"

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = float(rate)

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            return x, DropoutCache(None, 1.0)
        if rng is None:
            raise ConfigError("train-mode dropout needs a random generator")
        mask = rng.random(x.shape) >= self.rate
        scale = 1.0 / (1.0 - self.rate)
        return x * mask * x.dtype.type(scale), DropoutCache(mask, scale)

    def backward(self, cache, grad):
        if cache.mask is None:
            return grad, {}
        return grad * cache.mask * grad.dtype.type(cache.scale), {}

    def describe(self):
        return {"kind": self.kind, "rate": self.rate}
