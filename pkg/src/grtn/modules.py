"""Lightweight parameter containers over the tensor engine.

No general module system: each block stores its tensors explicitly and
reports them through ``named_parameters()`` in a fixed construction
order, which the optimizer and the checkpoint format both rely on.
"""

from __future__ import annotations

import numpy as np

from . import functional as F
from .tensor import Tensor


def init_weight(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    """Uniform Kaiming-style init in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


class Conv2d:
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng,
                 stride: int = 1, padding: int | None = None, groups: int = 1,
                 dtype=np.float32):
        if padding is None:
            padding = kernel // 2
        self.stride = stride
        self.padding = padding
        self.groups = groups
        fan_in = (in_ch // groups) * kernel * kernel
        self.weight = init_weight(rng, (out_ch, in_ch // groups, kernel, kernel),
                                  fan_in, dtype)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding, groups=self.groups)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


class Dense:
    def __init__(self, in_dim: int, out_dim: int, rng, dtype=np.float32):
        self.weight = init_weight(rng, (in_dim, out_dim), in_dim, dtype)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


class LayerNorm:
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor, axis: int = -1) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, axis=axis, eps=self.eps)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta


def collect_parameters(blocks: list[tuple[str, object]]):
    """Chain named_parameters across (prefix, block) pairs."""
    for prefix, block in blocks:
        yield from block.named_parameters(prefix)
