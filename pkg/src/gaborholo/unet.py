"""UNet auto-encoder with hand-written backpropagation.

Topology: a two-convolution stem to ``base_channels``, ``depth`` down blocks
(max-pool, two 3x3 conv+ReLU, channels doubled), ``depth`` up blocks
(2x2 stride-2 transposed conv halving channels, concatenation with the
mirror encoder map, two 3x3 conv+ReLU) and a 1x1 conv + ReLU head.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import layers
from .layers import ShapeError
from .seeding import raw_stream, split_mix

MAGIC = b"GFNC"
CHECKPOINT_VERSION = 1


class StateError(RuntimeError):
    """Backward called with a cache that does not belong to the parameters."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    input_size: int = 512
    depth: int = 7
    base_channels: int = 16
    seed: int = 0
    kernel_size: int = 3

    def __post_init__(self):
        n = self.input_size
        if n < 1 or n & (n - 1):
            raise ValueError(f"input_size must be a power of two, got {n}")
        if self.depth < 0 or n >> self.depth < 1:
            raise ValueError(f"depth {self.depth} too large for input_size {n}")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.kernel_size != 3:
            raise ValueError("only 3x3 kernels are supported")

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def layer_shapes(self) -> "OrderedDict[str, tuple[int, ...]]":
        """Kernel shapes in construction order; each layer also has a bias."""
        k = self.kernel_size
        shapes = OrderedDict()
        shapes["enc0.conv1"] = (k, k, 1, self.channels(0))
        shapes["enc0.conv2"] = (k, k, self.channels(0), self.channels(0))
        for d in range(1, self.depth + 1):
            shapes[f"enc{d}.conv1"] = (k, k, self.channels(d - 1), self.channels(d))
            shapes[f"enc{d}.conv2"] = (k, k, self.channels(d), self.channels(d))
        for d in range(self.depth, 0, -1):
            c = self.channels(d - 1)
            shapes[f"dec{d}.up"] = (2, 2, self.channels(d), c)
            shapes[f"dec{d}.conv1"] = (k, k, 2 * c, c)
            shapes[f"dec{d}.conv2"] = (k, k, c, c)
        shapes["head"] = (1, 1, self.channels(0), 1)
        return shapes


class Parameters:
    """Ordered named arrays with matching gradient buffers."""

    def __init__(self, values: "OrderedDict[str, np.ndarray]"):
        self.values = OrderedDict((k, np.ascontiguousarray(v)) for k, v in values.items())
        self.grads = OrderedDict((k, np.zeros_like(v)) for k, v in self.values.items())
        self.version = 0

    def __getitem__(self, name):
        return self.values[name]

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    @property
    def dtype(self):
        return next(iter(self.values.values())).dtype

    def count(self) -> int:
        return sum(v.size for v in self.values.values())

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0)

    def copy(self) -> "Parameters":
        return Parameters(OrderedDict((k, v.copy()) for k, v in self.values.items()))

    def astype(self, dtype) -> "Parameters":
        return Parameters(OrderedDict((k, v.astype(dtype)) for k, v in self.values.items()))

    def checksum(self) -> bytes:
        import hashlib

        h = hashlib.sha256()
        for k, v in self.values.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.digest()


def init_parameters(config: UNetConfig, seed: int | None = None) -> Parameters:
    """Uniform(-b, b) kernels with b = sqrt(6 / (fan_in + fan_out)); zero biases."""
    seed = config.seed if seed is None else seed
    values = OrderedDict()
    for idx, (name, shape) in enumerate(config.layer_shapes().items()):
        kh, kw, cin, cout = shape
        bound = np.sqrt(6.0 / (kh * kw * cin + kh * kw * cout))
        raw = raw_stream(split_mix(seed, idx), int(np.prod(shape)))
        u = (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53  # [0, 1)
        values[name + ".w"] = ((2.0 * u - 1.0) * bound).reshape(shape)
        values[name + ".b"] = np.zeros(cout)
    return Parameters(values)


def sgd_step(params: Parameters, learning_rate: float) -> None:
    for name, v in params.values.items():
        v -= learning_rate * params.grads[name]
    params.zero_grad()
    params.version += 1


# -- network ---------------------------------------------------------------------


class _Cache:
    __slots__ = ("config", "params_id", "version", "entries", "consumed", "input_shape")

    def __init__(self, config, params, input_shape):
        self.config = config
        self.params_id = id(params)
        self.version = params.version
        self.entries = {}
        self.consumed = False
        self.input_shape = input_shape


def _conv_relu(params, name, x, cache):
    y, c = layers.conv2d(x, params[name + ".w"], params[name + ".b"])
    out, pre = layers.relu(y)
    cache.entries[name] = (c, pre)
    return out


def _conv_relu_backward(params, name, g, cache):
    c, pre = cache.entries[name]
    g = layers.relu_backward(pre, g)
    dx, dw, db = layers.conv2d_backward(c, g)
    params.grads[name + ".w"] += dw
    params.grads[name + ".b"] += db
    return dx


def unet_forward(config: UNetConfig, params: Parameters, x: np.ndarray):
    """Run the network on a (B, 1, S, S) batch; returns (output, cache)."""
    x = np.asarray(x, dtype=params.dtype)
    s = config.input_size
    if x.ndim != 4 or x.shape[1:] != (1, s, s):
        raise ShapeError(f"input: expected (B, 1, {s}, {s}), got {x.shape}")
    cache = _Cache(config, params, x.shape)
    h = _conv_relu(params, "enc0.conv1", x, cache)
    h = _conv_relu(params, "enc0.conv2", h, cache)
    skips = [h]
    for d in range(1, config.depth + 1):
        try:
            h, cache.entries[f"enc{d}.pool"] = layers.maxpool2(h)
        except ShapeError as exc:
            raise ShapeError(f"enc{d}: {exc}") from exc
        h = _conv_relu(params, f"enc{d}.conv1", h, cache)
        h = _conv_relu(params, f"enc{d}.conv2", h, cache)
        skips.append(h)
    for d in range(config.depth, 0, -1):
        name = f"dec{d}"
        h, cache.entries[name + ".up"] = layers.convtranspose2(h, params[name + ".up.w"], params[name + ".up.b"])
        try:
            h, cache.entries[name + ".cat"] = layers.concat_channels(skips[d - 1], h)
        except ShapeError as exc:
            raise ShapeError(f"{name}: {exc}") from exc
        h = _conv_relu(params, name + ".conv1", h, cache)
        h = _conv_relu(params, name + ".conv2", h, cache)
    out = _conv_relu(params, "head", h, cache)
    return out, cache


def unet_backward(config: UNetConfig, params: Parameters, cache: _Cache, grad_out: np.ndarray) -> np.ndarray:
    """Accumulate parameter gradients into ``params.grads``; return d(input)."""
    if not isinstance(cache, _Cache) or cache.consumed:
        raise StateError("cache already used or not produced by unet_forward")
    if cache.config != config or cache.params_id != id(params) or cache.version != params.version:
        raise StateError("cache was produced by different parameters or before an update")
    if grad_out.shape != cache.input_shape:
        raise ShapeError(f"output gradient shape {grad_out.shape} != {cache.input_shape}")
    cache.consumed = True
    g = _conv_relu_backward(params, "head", np.asarray(grad_out, dtype=params.dtype), cache)
    skip_grads = [None] * (config.depth + 1)
    for d in range(1, config.depth + 1):
        name = f"dec{d}"
        g = _conv_relu_backward(params, name + ".conv2", g, cache)
        g = _conv_relu_backward(params, name + ".conv1", g, cache)
        g_skip, g = layers.split_channels(cache.entries[name + ".cat"], g)
        skip_grads[d - 1] = g_skip
        g, dw, db = layers.convtranspose2_backward(cache.entries[name + ".up"], g)
        params.grads[name + ".up.w"] += dw
        params.grads[name + ".up.b"] += db
    # g is now the gradient flowing into the bottleneck output
    for d in range(config.depth, 0, -1):
        g = g + skip_grads[d] if d < config.depth else g
        g = _conv_relu_backward(params, f"enc{d}.conv2", g, cache)
        g = _conv_relu_backward(params, f"enc{d}.conv1", g, cache)
        g = layers.maxpool2_backward(cache.entries[f"enc{d}.pool"], g)
    g = g + skip_grads[0] if config.depth > 0 else g
    g = _conv_relu_backward(params, "enc0.conv2", g, cache)
    return _conv_relu_backward(params, "enc0.conv1", g, cache)


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(path, config: UNetConfig, params: Parameters) -> None:
    """Little-endian binary: magic, version, config, then one record per array."""
    parts = [MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    parts.append(struct.pack("<IIIQ", config.input_size, config.depth, config.base_channels, config.seed))
    parts.append(struct.pack("<I", len(params)))
    for name, v in params.values.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)) + encoded)
        parts.append(struct.pack("<I", v.ndim) + struct.pack(f"<{v.ndim}Q", *v.shape))
        parts.append(np.ascontiguousarray(v, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[UNetConfig, Parameters]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    size, depth, base, seed = take("<IIIQ")
    config = UNetConfig(input_size=size, depth=depth, base_channels=base, seed=seed)
    (count,) = take("<I")
    values = OrderedDict()
    for _ in range(count):
        (nlen,) = take("<I")
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        shape = take(f"<{rank}Q")
        n = int(np.prod(shape)) if rank else 1
        if pos + 8 * n > len(data):
            raise CheckpointError(f"{path}: truncated array {name}")
        values[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    expected = {f"{k}.{s}" for k in config.layer_shapes() for s in ("w", "b")}
    if set(values) != expected:
        raise CheckpointError(f"{path}: array names do not match the configured network")
    return config, Parameters(values)
