"""Parameter containers and the reusable layers built on the primitives."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ops
from .tensor import DEFAULT_DTYPE, Parameter, Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Normal samples with everything beyond two std redrawn."""
    out = rng.standard_normal(size=shape, dtype=np.float32)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(size=int(bad.sum()), dtype=np.float32)
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


class Module:
    """Base class: any attribute holding a Parameter, Module, or list of
    Modules is discovered by :meth:`named_parameters`."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{prefix}{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = own.keys() - state.keys()
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, p in own.items():
            p.assign(state[name])


class Linear(Module):
    def __init__(self, rng, c_in: int, c_out: int, std: float = 0.02, zero: bool = False):
        w = np.zeros((c_in, c_out), DEFAULT_DTYPE) if zero else trunc_normal(rng, (c_in, c_out), std)
        self.weight = Parameter(w, "weight")
        self.bias = Parameter(np.zeros(c_out, DEFAULT_DTYPE), "bias")

    def forward(self, x) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    """Dense k x k convolution, fan-in scaled init unless ``zero``."""

    def __init__(self, rng, c_in, c_out, kernel=1, stride=1, padding=None, zero=False):
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        shape = (kernel, kernel, c_in, c_out)
        if zero:
            w = np.zeros(shape, DEFAULT_DTYPE)
        else:
            w = trunc_normal(rng, shape, math.sqrt(2.0 / (kernel * kernel * c_in)))
        self.weight = Parameter(w, "weight")
        self.bias = Parameter(np.zeros(c_out, DEFAULT_DTYPE), "bias")

    def forward(self, x) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class DepthwiseConv2d(Module):
    def __init__(self, rng, channels, kernel=3, stride=1, padding=None):
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        w = trunc_normal(rng, (kernel, kernel, channels), math.sqrt(2.0 / (kernel * kernel)))
        self.weight = Parameter(w, "weight")
        self.bias = Parameter(np.zeros(channels, DEFAULT_DTYPE), "bias")

    def forward(self, x) -> Tensor:
        return ops.depthwise_conv2d(x, self.weight, self.bias, self.stride, self.padding)


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-6):
        self.eps = eps
        self.weight = Parameter(np.ones(channels, DEFAULT_DTYPE), "weight")
        self.bias = Parameter(np.zeros(channels, DEFAULT_DTYPE), "bias")

    def forward(self, x) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, self.eps)
