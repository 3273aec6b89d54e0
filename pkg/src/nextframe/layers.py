"""Dense, batch normalization, dropout and Glorot initialization.

Each op comes as a ``*_forward`` returning ``(output, cache)`` and a
``*_backward`` consuming that cache.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, elementwise

ACTIVATIONS = ("none", "relu", "sigmoid")


@dataclass
class DenseParams:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str = "none"

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"dense W{self.W.shape} / b{self.b.shape} inconsistent")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def dense_forward(x, p: DenseParams):
    if x.ndim != 2 or x.shape[1] != p.W.shape[1]:
        raise ShapeError(f"dense expects batch×{p.W.shape[1]}, got {x.shape}")
    z = x @ p.W.T + p.b
    if p.activation == "none":
        y = z
    else:
        y = elementwise(p.activation, z)
    return y, (x, z, y, p)


def dense_backward(cache, dy):
    """Returns ``(dW, db, dx)``."""
    x, z, y, p = cache
    if p.activation == "sigmoid":
        dz = dy * y * (1 - y)
    elif p.activation == "relu":
        dz = dy * elementwise("d_relu", z)
    else:
        dz = dy
    return dz.T @ x, dz.sum(axis=0), dz @ p.W


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-3
    momentum: float = 0.99

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")

    @classmethod
    def create(cls, channels, epsilon=1e-3, momentum=0.99, dtype=np.float32):
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype), epsilon, momentum)


def _channel_view(v, ndim, axis):
    shape = [1] * ndim
    shape[axis] = -1
    return v.reshape(shape)


def batchnorm_forward(x, p: BatchNormParams, mode: str = "train", axis: int = 1):
    """Per-channel normalization; ``axis`` names the channel axis of ``x``.

    Train mode uses batch statistics over every other axis and updates the
    running statistics in place; eval mode uses the running statistics.
    """
    axis = axis % x.ndim
    if x.shape[axis] != p.gamma.shape[0]:
        raise ShapeError(f"{p.gamma.shape[0]} channels expected on axis {axis}, got {x.shape}")
    reduce = tuple(a for a in range(x.ndim) if a != axis)
    if mode == "train":
        if x.shape[0] < 2:
            raise ShapeError("train-mode batchnorm needs a batch of at least 2")
        mean = x.mean(axis=reduce)
        var = x.var(axis=reduce)
        p.running_mean *= p.momentum
        p.running_mean += (1 - p.momentum) * mean
        p.running_var *= p.momentum
        p.running_var += (1 - p.momentum) * var
    elif mode == "eval":
        mean, var = p.running_mean, p.running_var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv_std = (1.0 / np.sqrt(var + p.epsilon)).astype(x.dtype)
    xhat = (x - _channel_view(mean, x.ndim, axis)) * _channel_view(inv_std, x.ndim, axis)
    y = xhat * _channel_view(p.gamma, x.ndim, axis) + _channel_view(p.beta, x.ndim, axis)
    return y, (xhat, inv_std, p, mode, axis, reduce)


def batchnorm_backward(cache, dy):
    """Returns ``(dgamma, dbeta, dx)``."""
    xhat, inv_std, p, mode, axis, reduce = cache
    dgamma = (dy * xhat).sum(axis=reduce)
    dbeta = dy.sum(axis=reduce)
    scale = _channel_view(p.gamma * inv_std, dy.ndim, axis)
    if mode == "eval":
        return dgamma, dbeta, dy * scale
    n = dy.size // dy.shape[axis]
    dx = scale / n * (n * dy - _channel_view(dbeta, dy.ndim, axis)
                      - xhat * _channel_view(dgamma, dy.ndim, axis))
    return dgamma, dbeta, dx


def dropout_forward(x, rate: float, mode: str, rng: np.random.Generator):
    """Inverted dropout; returns ``(y, mask)`` with ``mask`` None when inactive."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0:
        return x, None
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1 - rate)
    return x * mask, mask


def dropout_backward(mask, dy):
    return dy if mask is None else dy * mask


def glorot_init(dims, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Glorot-uniform samples; dims are (fan_out, fan_in, *receptive_field)."""
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2:
        raise ShapeError("glorot_init needs rank >= 2")
    receptive = int(np.prod(dims[2:])) if len(dims) > 2 else 1
    fan_out, fan_in = dims[0] * receptive, dims[1] * receptive
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=dims).astype(dtype)
