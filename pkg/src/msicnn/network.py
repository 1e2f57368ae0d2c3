"""Network assembly, softmax cross-entropy, backpropagation and SGD."""

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DimensionError, FormatError, BadMagicError, TruncatedFileError, PayloadLengthError
from .layers import Conv2D, Dense, Dropout, Flatten, Layer, MaxPool2D, ReLU
from .tensor import resolve_dtype

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class NetworkConfig:
    input_shape: Tuple[int, int, int]
    conv_blocks: Tuple[Tuple[int, int], ...] = ((32, 2), (64, 2), (128, 3), (256, 3))
    fc_sizes: Tuple[int, ...] = (1024, 1024, 4)
    class_count: int = 4
    kernel_size: int = 3
    stride: int = 1
    zero_pad: int = 1
    # (after each max-pool, after each hidden dense layer)
    dropout_rates: Tuple[float, float] = (0.25, 0.5)
    relu_on_output: bool = False
    dropout_on_output: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        norm = {
            "input_shape": tuple(int(v) for v in self.input_shape),
            "conv_blocks": tuple((int(f), int(n)) for f, n in self.conv_blocks),
            "fc_sizes": tuple(int(v) for v in self.fc_sizes),
            "dropout_rates": tuple(float(v) for v in self.dropout_rates),
        }
        for key, value in norm.items():
            object.__setattr__(self, key, value)
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (H, W, C) with positive extents, got {self.input_shape}")
        if any(f < 1 or n < 1 for f, n in self.conv_blocks):
            raise ConfigError(f"conv_blocks entries must be positive (filters, layers) pairs: {self.conv_blocks}")
        if not self.fc_sizes or min(self.fc_sizes) < 1:
            raise ConfigError(f"fc_sizes must be non-empty and positive: {self.fc_sizes}")
        if self.fc_sizes[-1] != self.class_count:
            raise ConfigError(f"last fc size {self.fc_sizes[-1]} must equal class_count {self.class_count}")
        if self.kernel_size < 1 or self.stride < 1 or self.zero_pad < 0:
            raise ConfigError("kernel_size and stride must be >= 1, zero_pad >= 0")
        if len(self.dropout_rates) != 2 or not all(0.0 <= r < 1.0 for r in self.dropout_rates):
            raise ConfigError(f"dropout_rates must be two values in [0, 1): {self.dropout_rates}")
        resolve_dtype(self.dtype)

    @property
    def weighted_layer_count(self) -> int:
        return sum(n for _, n in self.conv_blocks) + len(self.fc_sizes)

    def replace(self, **changes) -> "NetworkConfig":
        data = asdict(self)
        data.update(changes)
        return NetworkConfig(**data)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown network config key(s): {', '.join(sorted(unknown))}")
        return cls(**data)


def paper_preset(input_shape=(128, 128, 16), **overrides) -> NetworkConfig:
    """Halved VGG16 without its last conv block: 10 conv + 3 dense layers."""
    return NetworkConfig(input_shape=input_shape, **overrides)


def tiny_preset(input_shape=(8, 8, 2), **overrides) -> NetworkConfig:
    params = dict(conv_blocks=((4, 1), (8, 1)), fc_sizes=(16, 4), dropout_rates=(0.0, 0.0))
    params.update(overrides)
    return NetworkConfig(input_shape=input_shape, **params)


def desk_preset(input_shape=(32, 32, 8), **overrides) -> NetworkConfig:
    params = dict(conv_blocks=((8, 2), (16, 2)), fc_sizes=(64, 4))
    params.update(overrides)
    return NetworkConfig(input_shape=input_shape, **params)


@dataclass(frozen=True)
class InitSpec:
    n_in: int
    n_out: int

    def __post_init__(self):
        if self.n_in < 1 or self.n_out < 1:
            raise ConfigError(f"fan counts must be >= 1, got ({self.n_in}, {self.n_out})")

    @property
    def sd(self) -> float:
        return math.sqrt(2.0 / (self.n_in + self.n_out))


def xavier_init(spec: InitSpec, shape, rng: np.random.Generator, dtype="float32") -> np.ndarray:
    dt = resolve_dtype(dtype)
    w = rng.standard_normal(tuple(shape), dtype=dt)
    w *= dt.type(spec.sd)
    return w


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, label) -> np.ndarray:
    """Negative log-likelihood of ``label``; probabilities are floored at 1e-12."""
    probs = np.asarray(probs)
    label = np.asarray(label)
    k = probs.shape[-1]
    if np.any(label < 0) or np.any(label >= k):
        raise ConfigError(f"label out of range for {k} classes: {label}")
    p = np.take_along_axis(probs, label[..., None].astype(np.intp), axis=-1)[..., 0]
    return -np.log(np.maximum(p, PROB_FLOOR))


def one_hot(labels, k: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros(labels.shape + (k,), dtype=dtype)
    np.put_along_axis(out, labels[..., None], 1, axis=-1)
    return out


@dataclass
class ForwardCache:
    caches: list
    probs: np.ndarray
    version: int
    single: bool


@dataclass
class BackpropState:
    """Gradient sums over the examples seen since the last update."""

    grads: List[Dict[str, np.ndarray]]
    m: int = 0
    deltas: Optional[List[np.ndarray]] = None

    @classmethod
    def zeros_like(cls, net: "Network") -> "BackpropState":
        return cls([{k: np.zeros_like(v) for k, v in layer.params.items()} for layer in net.layers])

    def reset(self):
        for g in self.grads:
            for v in g.values():
                v.fill(0)
        self.m = 0
        self.deltas = None

    def merge(self, other: "BackpropState"):
        for mine, theirs in zip(self.grads, other.grads):
            for k in mine:
                mine[k] += theirs[k]
        self.m += other.m


class Network:
    def __init__(self, config: NetworkConfig, layers: List[Layer]):
        self.config = config
        self.layers = layers
        self.version = 0

    @property
    def dtype(self):
        return resolve_dtype(self.config.dtype)

    @property
    def weighted_layers(self) -> List[Layer]:
        return [l for l in self.layers if l.params]

    def parameters(self):
        """Yield ``(layer_index, name, array)`` in a fixed order."""
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                yield i, name, arr

    def parameter_count(self) -> int:
        return sum(a.size for _, _, a in self.parameters())

    @property
    def flatten_width(self) -> int:
        for layer in self.layers:
            if isinstance(layer, Dense):
                return layer.W.shape[1]
        raise ConfigError("network has no dense layer")

    def forward(self, x, train=False, rng=None):
        """Return ``(logits, probs, cache)`` for one image or a batch."""
        x = np.asarray(x)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.shape[1:] != self.config.input_shape:
            raise DimensionError(f"image shape {x.shape[1:]} does not match network input {self.config.input_shape}")
        x = x.astype(self.dtype, copy=False)
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, train=train, rng=rng)
            caches.append(cache)
        probs = softmax(x)
        cache = ForwardCache(caches, probs, self.version, single)
        if single:
            return x[0], probs[0], cache
        return x, probs, cache

    def predict(self, x) -> np.ndarray:
        _, probs, _ = self.forward(x)
        return probs.argmax(axis=-1)

    def backward(self, cache: ForwardCache, labels, state: Optional[BackpropState] = None,
                 record_deltas: bool = False) -> BackpropState:
        """Accumulate parameter gradients of the summed loss into ``state``."""
        if cache is None or not isinstance(cache, ForwardCache):
            raise ConfigError("backward needs the cache of a forward pass")
        if cache.version != self.version:
            raise ConfigError("forward cache is stale: parameters changed since it was computed")
        labels = np.atleast_1d(np.asarray(labels))
        probs = cache.probs
        if labels.shape != probs.shape[:1]:
            raise DimensionError(f"{labels.shape[0]} labels for a batch of {probs.shape[0]}")
        if state is None:
            state = BackpropState.zeros_like(self)
        # softmax + cross-entropy fused gradient w.r.t. the logits
        delta = probs - one_hot(labels, probs.shape[-1], dtype=probs.dtype)
        deltas = [delta] if record_deltas else None
        for i in range(len(self.layers) - 1, -1, -1):
            delta, grads = self.layers[i].backward(cache.caches[i], delta)
            for k, g in grads.items():
                state.grads[i][k] += g
            if record_deltas:
                deltas.append(delta)
        state.m += labels.shape[0]
        if record_deltas:
            state.deltas = deltas[::-1]
        return state

    def sgd_step(self, state: BackpropState, lr: float):
        """theta <- theta - lr * (1/m) * Delta, then reset the accumulator."""
        if state.m < 1:
            raise ConfigError("sgd_step needs at least one accumulated example (m == 0)")
        scale = lr / state.m
        for layer, grads in zip(self.layers, state.grads):
            for k, p in layer.params.items():
                p -= (scale * grads[k]).astype(p.dtype, copy=False)
        state.reset()
        self.version += 1

    def snapshot(self) -> List[np.ndarray]:
        return [a.copy() for _, _, a in self.parameters()]

    def restore(self, snapshot: Sequence[np.ndarray]):
        params = list(self.parameters())
        if len(params) != len(snapshot):
            raise DimensionError("snapshot does not match the network's parameter list")
        for (_, _, p), s in zip(params, snapshot):
            p[...] = s
        self.version += 1

    def digest(self) -> str:
        return hashlib.sha256(to_bytes(self)).hexdigest()


def build(config: NetworkConfig, rng: np.random.Generator) -> Network:
    dtype = config.dtype
    k = config.kernel_size
    post_pool, post_fc = config.dropout_rates
    layers: List[Layer] = []
    h, w, c = config.input_shape
    for b, (filters, count) in enumerate(config.conv_blocks, start=1):
        for _ in range(count):
            kernel = xavier_init(InitSpec(k * k * c, k * k * filters), (filters, k, k, c), rng, dtype)
            conv = Conv2D(kernel, np.zeros(filters, dtype=resolve_dtype(dtype)), config.stride, config.zero_pad)
            try:
                h, w, c = conv.output_shape((h, w, c))
            except DimensionError as exc:
                raise ConfigError(f"conv block {b} ({filters} filters): {exc}") from None
            layers += [conv, ReLU()]
        if h < 2 or w < 2:
            raise ConfigError(f"conv block {b} ({filters} filters): spatial extent {h}x{w} is below 2 before pooling")
        pool = MaxPool2D(2)
        h, w, c = pool.output_shape((h, w, c))
        layers += [pool, Dropout(post_pool)]
    layers.append(Flatten())
    width = h * w * c
    for i, units in enumerate(config.fc_sizes):
        W = xavier_init(InitSpec(width, units), (units, width), rng, dtype)
        layers.append(Dense(W, np.zeros(units, dtype=resolve_dtype(dtype))))
        last = i == len(config.fc_sizes) - 1
        if not last or config.relu_on_output:
            layers.append(ReLU())
        if not last:
            layers.append(Dropout(post_fc))
        elif config.dropout_on_output:
            layers.append(Dropout(post_fc))
        width = units
    return Network(config, layers)


# --- checkpoint container -------------------------------------------------

CHECKPOINT_MAGIC = b"SPNW"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def canonical_json(data) -> bytes:
    return json.dumps(data, sort_keys=True, separators=(",", ":")).encode("utf-8")


def to_bytes(net: Network) -> bytes:
    buf = io.BytesIO()
    cfg = canonical_json(net.config.to_dict())
    params = [a for _, _, a in net.parameters()]
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<HBI", CHECKPOINT_VERSION, _DTYPE_CODES[net.dtype], len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(params)))
    le = net.dtype.newbyteorder("<")
    for a in params:
        buf.write(struct.pack("<B", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(np.ascontiguousarray(a, dtype=le).tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"{self.what}: needs {self.pos + n} bytes, file has {len(self.data)}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def finish(self):
        if self.pos != len(self.data):
            raise PayloadLengthError(f"{self.what}: {len(self.data) - self.pos} trailing bytes after payload")


def from_bytes(data: bytes, what: str = "checkpoint") -> Network:
    r = _Reader(data, what)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{what}: not a network checkpoint (bad magic)")
    version, code, cfg_len = r.unpack("<HBI")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{what}: unsupported checkpoint version {version}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"{what}: unknown scalar type code {code}")
    try:
        config = NetworkConfig.from_dict(json.loads(r.take(cfg_len).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{what}: unreadable config block ({exc})") from None
    if _CODE_DTYPES[code] != resolve_dtype(config.dtype):
        raise FormatError(f"{what}: scalar type code disagrees with config dtype")
    # parameter values are overwritten below, the seed is irrelevant
    net = build(config, np.random.default_rng(0))
    (count,) = r.unpack("<I")
    params = list(net.parameters())
    if count != len(params):
        raise FormatError(f"{what}: {count} tensors stored, architecture needs {len(params)}")
    le = _CODE_DTYPES[code].newbyteorder("<")
    for _, name, p in params:
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        if tuple(shape) != p.shape:
            raise FormatError(f"{what}: tensor {name} has shape {shape}, expected {p.shape}")
        p[...] = np.frombuffer(r.take(p.size * le.itemsize), dtype=le).reshape(shape)
    r.finish()
    return net


def save_checkpoint(net: Network, path):
    with open(path, "wb") as fh:
        fh.write(to_bytes(net))


def load_checkpoint(path) -> Network:
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), what=str(path))
