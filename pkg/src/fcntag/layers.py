"""Layer objects wrapping the differentiable ops with their parameters.

Layers are called as ``layer(x, train)``.  Parameters are :class:`Tensor`
leaves with ``requires_grad`` set; batch-norm running statistics are plain
arrays owned by the layer.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

__all__ = [
    "UninitializedStatsError",
    "glorot_uniform",
    "Conv2D",
    "MaxPool2D",
    "BatchNorm",
    "Dropout",
    "Dense",
    "ReLU",
    "Sigmoid",
    "conv2d_same",
    "maxpool2d_floor",
    "relu",
    "sigmoid",
    "dense",
]


class UninitializedStatsError(RuntimeError):
    """Batch-norm inference requested before any statistics exist."""


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2D:
    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        k = kernel
        self.kernel = Tensor(
            glorot_uniform(rng, (out_channels, in_channels, k, k), in_channels * k * k,
                           out_channels * k * k, dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    def __call__(self, x, train: bool = False) -> Tensor:
        return T.conv2d(x, self.kernel, self.bias)

    def parameters(self) -> dict[str, Tensor]:
        return {"kernel": self.kernel, "bias": self.bias}


class MaxPool2D:
    def __init__(self, pool_h: int, pool_w: int):
        if pool_h < 1 or pool_w < 1:
            raise ValueError(f"pool sizes must be positive, got ({pool_h}, {pool_w})")
        self.pool = (pool_h, pool_w)

    def __call__(self, x, train: bool = False) -> Tensor:
        return T.maxpool2d(x, self.pool)

    def parameters(self) -> dict[str, Tensor]:
        return {}


class BatchNorm:
    """Per-channel batch normalization.

    The first training update copies the batch statistics into the running
    statistics; later updates blend with ``momentum`` weight on the old value.
    """

    def __init__(self, channels: int, momentum: float = 0.99, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.momentum = momentum
        self.eps = eps
        self.running_mean: np.ndarray | None = None
        self.running_var: np.ndarray | None = None
        self.n_updates = 0

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def set_prior(self) -> None:
        """Seed inference statistics with mean 0 / variance 1 (untrained models)."""
        dt = self.gamma.dtype
        self.running_mean = np.zeros(self.channels, dtype=dt)
        self.running_var = np.ones(self.channels, dtype=dt)

    def __call__(self, x, train: bool = False) -> Tensor:
        if train:
            out, mu, var = T.batchnorm(x, self.gamma, self.beta, eps=self.eps)
            self._update(mu, var)
            return out
        if self.running_mean is None:
            raise UninitializedStatsError("batch-norm inference before any training update")
        return T.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var, eps=self.eps)

    def _update(self, mu: np.ndarray, var: np.ndarray) -> None:
        dt = self.gamma.dtype
        if self.n_updates == 0 or self.running_mean is None:
            self.running_mean = mu.astype(dt, copy=True)
            self.running_var = var.astype(dt, copy=True)
        else:
            m = self.momentum
            self.running_mean = (m * self.running_mean + (1 - m) * mu).astype(dt)
            self.running_var = (m * self.running_var + (1 - m) * var).astype(dt)
        self.n_updates += 1

    def affine(self) -> tuple[np.ndarray, np.ndarray]:
        """(a, b) such that inference output is a * x + b per channel."""
        if self.running_mean is None:
            raise UninitializedStatsError("batch-norm inference before any training update")
        a = self.gamma.data / np.sqrt(self.running_var + self.eps)
        return a, self.beta.data - a * self.running_mean

    def parameters(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}


class Dropout:
    def __init__(self, rate: float = 0.5, rng: np.random.Generator | None = None):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def __call__(self, x, train: bool = False) -> Tensor:
        return T.dropout(x, self.rate, train, self.rng)

    def parameters(self) -> dict[str, Tensor]:
        return {}


class Dense:
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        # stored in×out so the forward pass is a plain x @ W
        self.weights = Tensor(glorot_uniform(rng, (in_features, out_features), in_features,
                                             out_features, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    def __call__(self, x, train: bool = False) -> Tensor:
        return dense(x, self.weights, self.bias)

    def parameters(self) -> dict[str, Tensor]:
        return {"weights": self.weights, "bias": self.bias}


class ReLU:
    def __call__(self, x, train: bool = False) -> Tensor:
        return T.relu(x)

    def parameters(self) -> dict[str, Tensor]:
        return {}


class Sigmoid:
    def __call__(self, x, train: bool = False) -> Tensor:
        return T.sigmoid(x)

    def parameters(self) -> dict[str, Tensor]:
        return {}


# functional spellings used by tests and the model builder

def conv2d_same(x, layer: Conv2D) -> Tensor:
    return layer(x)


def maxpool2d_floor(x, layer: MaxPool2D) -> Tensor:
    return layer(x)


def relu(x) -> Tensor:
    return T.relu(x)


def sigmoid(x) -> Tensor:
    return T.sigmoid(x)


def dense(x, weights, bias=None) -> Tensor:
    """Row-wise affine map ``x @ W + b`` for N×F input and F×out weights."""
    x = T._as_tensor(x)
    weights = T._as_tensor(weights, x.dtype)
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError("dense", f"input {x.shape} does not match weights {weights.shape}")
    out = T.matmul(x, weights)
    return out if bias is None else T.add(out, bias)
