"""Forward-only numeric kernels: convolution, pooling, small MLPs, activations.

Feature maps are ``float32`` arrays laid out ``(H, W, C)``. Every reduction
accumulates in ``float64`` and rounds back to ``float32`` once at the end.
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError

__all__ = [
    "ConvSpec",
    "MlpSpec",
    "MacCounter",
    "as_feature_map",
    "channel_pool",
    "conv2d",
    "count_macs",
    "instance_norm",
    "mlp_forward",
    "relu",
    "residual_block",
    "sigmoid",
    "softmax",
    "spatial_pool",
]


# ---------------------------------------------------------------------------
# multiply-accumulate instrumentation


class MacCounter:
    def __init__(self) -> None:
        self.total = 0
        self.by_kind: dict[str, int] = {}

    def add(self, n: int, kind: str) -> None:
        self.total += int(n)
        self.by_kind[kind] = self.by_kind.get(kind, 0) + int(n)


_counter: contextvars.ContextVar[MacCounter | None] = contextvars.ContextVar(
    "histprompt_mac_counter", default=None
)


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Count multiply-accumulates performed by kernels inside the block."""
    counter = MacCounter()
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


def add_macs(n: int, kind: str) -> None:
    counter = _counter.get()
    if counter is not None:
        counter.add(n, kind)


# ---------------------------------------------------------------------------
# layer specs


@dataclass
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    weights: np.ndarray = field(default=None, repr=False)  # (out, in, k, k)
    bias: np.ndarray = field(default=None, repr=False)  # (out,)
    residual: bool = False

    def __post_init__(self) -> None:
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and >= 1, got {self.kernel}")
        if self.stride < 1 or self.padding < 0:
            raise ConfigError("stride must be >= 1 and padding >= 0")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")
        shape = (self.out_channels, self.in_channels, self.kernel, self.kernel)
        if self.weights is None:
            self.weights = np.zeros(shape, np.float32)
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float32)
        if self.weights.size != np.prod(shape):
            raise ConfigError(
                f"conv weights have {self.weights.size} values, expected {int(np.prod(shape))}"
            )
        self.weights = self.weights.reshape(shape)
        if self.bias is None:
            self.bias = np.zeros(self.out_channels, np.float32)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float32).reshape(-1)
        if self.bias.size != self.out_channels:
            raise ConfigError("conv bias length must equal out_channels")
        if self.residual and (self.in_channels != self.out_channels or self.stride != 1):
            raise ConfigError("residual conv needs in_channels == out_channels and stride 1")

    @classmethod
    def random(cls, in_channels, out_channels, kernel, rng, *, stride=1, padding=None,
               residual=False, gain=np.sqrt(2.0)):
        """He-style seeded initialisation; padding defaults to 'same'."""
        if padding is None:
            padding = kernel // 2
        fan_in = in_channels * kernel * kernel
        w = rng.normal(0.0, gain / np.sqrt(fan_in), (out_channels, in_channels, kernel, kernel))
        b = rng.normal(0.0, 0.01, out_channels)
        return cls(in_channels, out_channels, kernel, stride, padding, w, b, residual)

    @classmethod
    def zeros(cls, in_channels, out_channels, kernel, *, stride=1, padding=None, residual=False):
        if padding is None:
            padding = kernel // 2
        return cls(in_channels, out_channels, kernel, stride, padding, residual=residual)

    @property
    def n_params(self) -> int:
        return self.weights.size + self.bias.size

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


@dataclass
class MlpSpec:
    """Two linear layers with a rectifier in between."""

    in_dim: int
    hidden_dim: int
    out_dim: int
    w1: np.ndarray = field(default=None, repr=False)  # (hidden, in)
    b1: np.ndarray = field(default=None, repr=False)
    w2: np.ndarray = field(default=None, repr=False)  # (out, hidden)
    b2: np.ndarray = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if min(self.in_dim, self.hidden_dim, self.out_dim) < 1:
            raise ConfigError("MLP dimensions must be positive")
        for name, shape in (("w1", (self.hidden_dim, self.in_dim)), ("b1", (self.hidden_dim,)),
                            ("w2", (self.out_dim, self.hidden_dim)), ("b2", (self.out_dim,))):
            value = getattr(self, name)
            if value is None:
                value = np.zeros(shape, np.float32)
            value = np.ascontiguousarray(value, dtype=np.float32)
            if value.size != np.prod(shape):
                raise ConfigError(f"MLP {name} has {value.size} values, expected {int(np.prod(shape))}")
            setattr(self, name, value.reshape(shape))

    @classmethod
    def random(cls, in_dim, hidden_dim, out_dim, rng):
        return cls(
            in_dim, hidden_dim, out_dim,
            rng.normal(0.0, np.sqrt(2.0 / in_dim), (hidden_dim, in_dim)),
            rng.normal(0.0, 0.01, hidden_dim),
            rng.normal(0.0, np.sqrt(1.0 / hidden_dim), (out_dim, hidden_dim)),
            rng.normal(0.0, 0.01, out_dim),
        )

    @property
    def n_params(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + self.b2.size


# ---------------------------------------------------------------------------
# kernels


def as_feature_map(x, channels: int | None = None, name: str = "input") -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3:
        raise DimensionError(f"{name} must be an (H, W, C) map, got shape {x.shape}")
    if x.shape[0] < 1 or x.shape[1] < 1 or x.shape[2] < 1:
        raise DimensionError(f"{name} is empty: {x.shape}")
    if channels is not None and x.shape[2] != channels:
        raise ConfigError(f"{name} has {x.shape[2]} channels, expected {channels}")
    return x


def conv2d(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Zero-padded 2-D cross-correlation on an (H, W, C) map."""
    x = as_feature_map(x, spec.in_channels)
    h, w, _ = x.shape
    ho, wo = spec.output_hw(h, w)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv produces empty output from {h}x{w} with kernel {spec.kernel}")
    k, s, p = spec.kernel, spec.stride, spec.padding
    x64 = x.astype(np.float64)
    if p:
        x64 = np.pad(x64, ((p, p), (p, p), (0, 0)))
    if k == 1:
        cols = x64[: (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s, :]
        out = cols @ spec.weights[:, :, 0, 0].astype(np.float64).T
    else:
        win = sliding_window_view(x64, (k, k), axis=(0, 1))[::s, ::s][:ho, :wo]
        out = np.tensordot(win, spec.weights.astype(np.float64), axes=([2, 3, 4], [1, 2, 3]))
    out += spec.bias
    if spec.residual:
        out += x
    add_macs(ho * wo * spec.out_channels * spec.in_channels * k * k, "conv")
    return out.astype(np.float32)


def mlp_forward(x, spec: MlpSpec) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != spec.in_dim:
        raise ConfigError(f"MLP expects {spec.in_dim} inputs, got {x.size}")
    hidden = np.maximum(spec.w1.astype(np.float64) @ x + spec.b1, 0.0)
    out = spec.w2.astype(np.float64) @ hidden + spec.b2
    add_macs(spec.in_dim * spec.hidden_dim + spec.hidden_dim * spec.out_dim, "mlp")
    return out.astype(np.float32)


def spatial_pool(x: np.ndarray, mode: str) -> np.ndarray:
    """Per-channel max or mean over all spatial positions."""
    x = as_feature_map(x)
    flat = x.reshape(-1, x.shape[2])
    if mode == "max":
        return flat.max(axis=0)
    if mode == "avg":
        return flat.astype(np.float64).mean(axis=0).astype(np.float32)
    raise ConfigError(f"unknown pooling mode {mode!r}")


def channel_pool(x: np.ndarray, mode: str) -> np.ndarray:
    x = as_feature_map(x)
    if mode == "max":
        return x.max(axis=2, keepdims=True)
    if mode == "avg":
        return x.astype(np.float64).mean(axis=2, keepdims=True).astype(np.float32)
    raise ConfigError(f"unknown pooling mode {mode!r}")


def softmax(x) -> np.ndarray:
    """Numerically stable softmax of a 1-D vector, computed in float64."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise DimensionError("softmax of an empty vector")
    e = np.exp(x - x.max())
    return e / e.sum()


def sigmoid(x):
    x = np.asarray(x)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    z = x.astype(np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out.astype(dtype)


def relu(x):
    x = np.asarray(x)
    return np.maximum(x, np.zeros((), x.dtype))


def instance_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x64 = np.asarray(x, dtype=np.float64)
    mu = x64.mean(axis=(0, 1), keepdims=True)
    var = x64.var(axis=(0, 1), keepdims=True)
    return ((x64 - mu) / np.sqrt(var + eps)).astype(np.float32)


def residual_block(x: np.ndarray, first: ConvSpec, second: ConvSpec, *,
                   activation: str = "relu", norm: bool = False) -> np.ndarray:
    """conv -> [norm] -> activation -> conv; shortcuts come from the specs' residual flags."""
    h = conv2d(x, first)
    if norm:
        h = instance_norm(h)
    if activation == "relu":
        h = relu(h)
    elif activation != "identity":
        raise ConfigError(f"unknown activation {activation!r}")
    return conv2d(h, second)
