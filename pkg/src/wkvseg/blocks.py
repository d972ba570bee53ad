"""Spatial-mix, channel-mix, the VRWKV block and the MBConv block.

All image tensors are channels-last (H, W, C). Token sequences for Bi-WKV
are the raster-order flattening of the map.
"""

from __future__ import annotations

import numpy as np

from .core import Conv2d, DepthwiseConv2d, LayerNorm, Linear, Module, Parameter, Tensor, ops
from .core.tensor import DEFAULT_DTYPE
from .errors import ConfigurationError
from .wkv import QShift, bi_wkv

EXPAND_RATIO = 4


def _decay_init(channels: int) -> tuple[np.ndarray, np.ndarray]:
    """Raw decay (pre-softplus) spread across channels, and a zigzag bonus."""
    ratio = np.arange(channels) / max(channels - 1, 1)
    w_raw = -3.0 + 6.0 * ratio ** 0.7
    zigzag = ((np.arange(channels) + 1) % 3 - 1) * 0.5
    u = np.log(0.3) + zigzag
    return w_raw.astype(DEFAULT_DTYPE), u.astype(DEFAULT_DTYPE)


class SpatialMix(Module):
    def __init__(self, rng, channels: int, qshift_variant: str = "additive"):
        if channels % 4:
            raise ConfigurationError(f"spatial mix needs channels % 4 == 0, got {channels}")
        self.shift_r = QShift(channels, 0.5, qshift_variant)
        self.shift_k = QShift(channels, 0.5, qshift_variant)
        self.shift_v = QShift(channels, 0.5, qshift_variant)
        self.receptance = Linear(rng, channels, channels)
        self.key = Linear(rng, channels, channels)
        self.value = Linear(rng, channels, channels)
        self.output = Linear(rng, channels, channels, zero=True)
        w_raw, u = _decay_init(channels)
        self.decay = Parameter(w_raw, "decay")  # w = softplus(decay)
        self.bonus = Parameter(u, "bonus")

    def forward(self, x: Tensor) -> Tensor:
        return spatial_mix_forward(x, self)


def spatial_mix_forward(x, layer: SpatialMix) -> Tensor:
    x = ops.lift(x)
    h, w, c = x.shape
    r = layer.receptance(layer.shift_r(x))
    k = layer.key(layer.shift_k(x))
    v = layer.value(layer.shift_v(x))
    mixed = bi_wkv(ops.reshape(k, (h * w, c)), ops.reshape(v, (h * w, c)),
                   ops.softplus(layer.decay), layer.bonus)
    gated = ops.mul(ops.sigmoid(ops.reshape(r, (h * w, c))), mixed)
    return ops.reshape(layer.output(gated), (h, w, c))


class ChannelMix(Module):
    def __init__(self, rng, channels: int, hidden_ratio: int = 2, qshift_variant: str = "additive"):
        if channels % 4:
            raise ConfigurationError(f"channel mix needs channels % 4 == 0, got {channels}")
        hidden = hidden_ratio * channels
        self.shift_r = QShift(channels, 0.5, qshift_variant)
        self.shift_k = QShift(channels, 0.5, qshift_variant)
        self.receptance = Linear(rng, channels, channels)
        self.key = Linear(rng, channels, hidden)
        self.value = Linear(rng, hidden, channels)
        self.output = Linear(rng, channels, channels, zero=True)

    def forward(self, x: Tensor) -> Tensor:
        return channel_mix_forward(x, self)


def channel_mix_forward(x, layer: ChannelMix) -> Tensor:
    x = ops.lift(x)
    r = layer.receptance(layer.shift_r(x))
    k = layer.key(layer.shift_k(x))
    v = layer.value(ops.squared_relu(k))
    return layer.output(ops.mul(ops.sigmoid(r), v))


class VRWKVBlock(Module):
    """Pre-norm residual pair: spatial mix, then channel mix."""

    def __init__(self, rng, channels: int, qshift_variant: str = "additive"):
        self.norm1 = LayerNorm(channels)
        self.spatial = SpatialMix(rng, channels, qshift_variant)
        self.norm2 = LayerNorm(channels)
        self.channel = ChannelMix(rng, channels, qshift_variant=qshift_variant)

    def forward(self, x: Tensor) -> Tensor:
        return vrwkv_block_forward(x, self)


def vrwkv_block_forward(x, block: VRWKVBlock) -> Tensor:
    x = ops.lift(x)
    x = ops.add(x, block.spatial(block.norm1(x)))
    return ops.add(x, block.channel(block.norm2(x)))


class MBConv(Module):
    """Inverted bottleneck: norm, 1x1 expand (x4), GELU, 3x3 depthwise
    (optionally strided), GELU, 1x1 project.

    The residual is used only when the block keeps shape; its project conv
    then starts at zero so the block is an identity at init.
    """

    def __init__(self, rng, c_in: int, c_out: int | None = None, stride: int = 1):
        c_out = c_in if c_out is None else c_out
        hidden = EXPAND_RATIO * c_in
        self.residual = stride == 1 and c_in == c_out
        self.norm = LayerNorm(c_in)
        self.expand = Conv2d(rng, c_in, hidden, kernel=1)
        self.dw = DepthwiseConv2d(rng, hidden, kernel=3, stride=stride)
        self.project = Conv2d(rng, hidden, c_out, kernel=1, zero=self.residual)

    def forward(self, x: Tensor) -> Tensor:
        return mbconv_forward(x, self)


def mbconv_forward(x, block: MBConv) -> Tensor:
    x = ops.lift(x)
    y = ops.gelu(block.expand(block.norm(x)))
    y = ops.gelu(block.dw(y))
    y = block.project(y)
    return ops.add(x, y) if block.residual else y
