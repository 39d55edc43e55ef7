"""Small parameterized building blocks shared by the block and the network."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, conv2d, expand, layer_norm, matmul, reshape


class Linear:
    """Position-wise channel map for [Cin, P] tensors."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float64):
        w = rng.standard_normal((cout, cin)) / np.sqrt(cin)
        self.w = Tensor(w.astype(dtype), requires_grad=True)
        self.b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(self.w, x)
        return y + expand(reshape(self.b, self.b.shape[0], 1), y.shape)

    def named(self, prefix: str):
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


class ChannelNorm:
    """Layer normalization over the channel axis of [C, ...] tensors."""

    def __init__(self, c: int, dtype=np.float64, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, axis=0, eps=self.eps)

    def named(self, prefix: str):
        return [(f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta)]


class Conv:
    """conv2d with owned weights; kernel is square."""

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride=1, padding=0, groups=1, dtype=np.float64):
        fan_in = (cin // groups) * k * k
        w = rng.standard_normal((cout, cin // groups, k, k)) / np.sqrt(fan_in)
        self.w = Tensor(w.astype(dtype), requires_grad=True)
        self.b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        self.stride, self.padding, self.groups = stride, padding, groups

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding, groups=self.groups)

    def named(self, prefix: str):
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]
