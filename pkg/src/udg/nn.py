"""Dense layers with hand-written backprop, SGD with momentum, cosine schedule.

Everything is float64 numpy. Matrices are ``(rows, cols)`` arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class NumericalError(FloatingPointError):
    pass


@dataclass
class Linear:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    grad_weight: np.ndarray = field(default=None, repr=False)
    grad_bias: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bad layer shapes {self.weight.shape} / {self.bias.shape}")
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "Linear":
        bound = 1.0 / math.sqrt(in_dim)
        w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
        b = rng.uniform(-bound, bound, size=out_dim)
        return cls(w, b)

    def params(self):
        return [(self.weight, self.grad_weight), (self.bias, self.grad_bias)]


def linear_forward(x: np.ndarray, layer: Linear) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise ShapeError(f"input has shape {x.shape}, layer expects {layer.in_dim} columns")
    return x @ layer.weight.T + layer.bias


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


class MLP:
    """Stack of Linear layers with ReLU after every layer.

    ``forward`` caches what ``backward`` needs; ``backward`` overwrites the
    layers' gradient buffers and returns the gradient w.r.t. the input.
    """

    def __init__(self, layers: list[Linear]):
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer widths do not chain: {a.out_dim} -> {b.in_dim}")
        self.layers = layers
        self._cache = None

    @classmethod
    def init(cls, widths: list[int], rng: np.random.Generator) -> "MLP":
        return cls([Linear.init(i, o, rng) for i, o in zip(widths, widths[1:])])

    @property
    def in_dim(self):
        return self.layers[0].in_dim if self.layers else None

    @property
    def out_dim(self):
        return self.layers[-1].out_dim if self.layers else None

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        inputs = []
        pre = []
        h = x
        for layer in self.layers:
            inputs.append(h)
            z = linear_forward(h, layer)
            pre.append(z)
            h = relu(z)
        if cache:
            self._cache = (inputs, pre)
        return h

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError("backward called before forward")
        inputs, pre = self._cache
        g = np.asarray(grad_out, dtype=np.float64)
        for layer, h_in, z in zip(reversed(self.layers), reversed(inputs), reversed(pre)):
            g = g * (z > 0)
            layer.grad_weight[...] = g.T @ h_in
            layer.grad_bias[...] = g.sum(axis=0)
            g = g @ layer.weight
        return g

    def params(self):
        return [p for layer in self.layers for p in layer.params()]


@dataclass
class SGD:
    """SGD with heavy-ball momentum and coupled L2 weight decay.

    v <- momentum * v + (g + weight_decay * theta);  theta <- theta - lr * v
    """

    lr: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    buffers: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")

    def step(self, params):
        for i, (theta, grad) in enumerate(params):
            if not np.all(np.isfinite(grad)):
                raise NumericalError(f"non-finite gradient in parameter tensor {i} {theta.shape}")
            d = grad + self.weight_decay * theta
            v = self.buffers.get(i)
            if v is None:
                v = self.buffers[i] = np.zeros_like(theta)
            v *= self.momentum
            v += d
            theta -= self.lr * v


def sgd_step(params, opt: SGD):
    opt.step(params)


def cosine_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    if total_epochs <= 0:
        raise ValueError("total_epochs must be positive")
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * epoch / total_epochs))
