"""Parameterized layers and naming/initialization plumbing shared by the models.

Every parameter gets a stable dotted name (used by checkpoints and by
stage-plan freezing patterns) and its own RNG substream derived from
(seed, name). Layers that appear in two models under the same name
therefore initialize bitwise identically, independent of what other
layers exist around them.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import tensor as T
from .tensor import Tensor


def layer_rng(seed: int, name: str) -> np.random.Generator:
    """Deterministic per-layer stream; stable across runs and processes."""
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed, zlib.crc32(name.encode("utf-8"))])
    ))


class Parameter(Tensor):
    """Trainable tensor with a weight-decay eligibility flag."""

    __slots__ = ("decay",)

    def __init__(self, data, decay: bool = True, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.decay = decay


def he_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def glorot_init(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d:
    """Convolution layer owning weight/bias parameters."""

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=1,
                 groups=1, *, seed, name, dtype=np.float64, zero_init=False):
        k = kernel_size
        rng = layer_rng(seed, name)
        shape = (out_channels, in_channels // groups, k, k)
        fan_in = (in_channels // groups) * k * k
        if zero_init:
            w = np.zeros(shape, dtype=dtype)
        else:
            w = he_init(rng, shape, fan_in, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype), decay=False)
        self.stride = stride
        self.padding = padding
        self.groups = groups
        self.name = name

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding, groups=self.groups)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class Linear:
    def __init__(self, in_features, out_features, *, seed, name, dtype=np.float64,
                 zero_init=False):
        rng = layer_rng(seed, name)
        if zero_init:
            w = np.zeros((out_features, in_features), dtype=dtype)
        else:
            w = glorot_init(rng, (out_features, in_features), in_features, out_features, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features, dtype=dtype), decay=False)
        self.name = name

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class AffineNorm:
    """Per-channel learnable scale and shift (stateless batch-norm stand-in).

    Expects (B, C, H, W); both parameters are excluded from weight decay.
    """

    def __init__(self, channels, *, dtype=np.float64):
        self.scale = Parameter(np.ones(channels, dtype=dtype), decay=False)
        self.shift = Parameter(np.zeros(channels, dtype=dtype), decay=False)
        self.channels = channels

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(f"AffineNorm({self.channels}): bad input shape {x.shape}")
        return T.channel_affine(x, self.scale, self.shift)

    def parameters(self):
        return [("scale", self.scale), ("shift", self.shift)]


def collect_parameters(named_layers) -> dict:
    """Flatten [(prefix, layer-or-param)] into {dotted_name: Parameter}."""
    out: dict[str, Parameter] = {}
    for prefix, obj in named_layers:
        if isinstance(obj, Parameter):
            out[prefix] = obj
        else:
            for suffix, p in obj.parameters():
                out[f"{prefix}.{suffix}"] = p
    return out
