"""Dense layers, MLPs and the Adam optimizer on top of :mod:`kmyriad.tensor`."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear:
    """Affine map ``x @ W + b`` with W stored as [fan_in, fan_out]."""

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator | None = None,
                 bias: float = 0.0, gain: float = 1.0):
        if rng is None:
            w = np.zeros((fan_in, fan_out))
        else:
            w = gain * glorot_uniform(rng, fan_in, fan_out)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.full(fan_out, bias), requires_grad=True)

    def __call__(self, x) -> Tensor:
        return T.matmul(x, self.weight) + self.bias

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class MLP:
    """Stack of :class:`Linear` layers with ReLU between them.

    ``final_activation`` controls whether the last layer is also rectified.
    """

    def __init__(self, sizes: list[int], rng: np.random.Generator | None = None,
                 final_activation: bool = False):
        self.layers = [Linear(i, o, rng) for i, o in zip(sizes[:-1], sizes[1:])]
        self.final_activation = final_activation

    def __call__(self, x) -> Tensor:
        for n, layer in enumerate(self.layers):
            x = layer(x)
            if n < len(self.layers) - 1 or self.final_activation:
                x = T.relu(x)
        return x

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]


class Critic(MLP):
    """State-value network [d_s -> 256 -> 256 -> 1]."""

    def __init__(self, state_dim: int = 4, hidden: tuple[int, ...] = (256, 256),
                 rng: np.random.Generator | None = None):
        super().__init__([state_dim, *hidden, 1], rng)

    def values(self, states) -> Tensor:
        out = self(states)
        return T.sum_(out, axis=1)


class Adam:
    """Adam over a fixed parameter list; ``step`` swaps in fresh arrays."""

    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: list[np.ndarray], ascent: bool = False) -> None:
        if self.lr == 0.0:
            return
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        sign = 1.0 if ascent else -1.0
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = p.data + sign * self.lr * update
