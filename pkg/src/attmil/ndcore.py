"""Dense array primitives and neural layers with hand-derived gradients.

Arrays are plain ``numpy.ndarray`` in float64. Randomness always flows through
``numpy.random.Generator`` backed by PCG64 (PCG XSL RR 128/64), which yields the
same stream for a given seed on every platform.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
# smallest normal float64; keeps sigmoid strictly positive under underflow
_SIGMOID_FLOOR = np.finfo(np.float64).tiny


class NumericalError(FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent child streams derived from one seed."""
    children = np.random.SeedSequence(int(seed)).spawn(n)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


def check_finite(x: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {what}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.maximum(out, _SIGMOID_FLOOR)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def leaky_relu(x: np.ndarray, slope: float = 0.01) -> np.ndarray:
    if slope < 0:
        raise ValueError("slope must be non-negative")
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(grad_out: np.ndarray, x: np.ndarray, slope: float = 0.01) -> np.ndarray:
    return grad_out * np.where(x > 0, 1.0, slope)


def affine_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return matmul(x, w) + b


def affine_backward(grad_out: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Returns (grad_x, grad_w, grad_b)."""
    return grad_out @ w.T, x.T @ grad_out, grad_out.sum(axis=0)


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def create(cls, n_features: int) -> "BatchNormState":
        return cls(
            gamma=np.ones(n_features),
            beta=np.zeros(n_features),
            running_mean=np.zeros(n_features),
            running_var=np.ones(n_features),
        )


@dataclass
class BatchNormCache:
    mode: str
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray = field(repr=False)


def batchnorm_forward(x: np.ndarray, state: BatchNormState, mode: str = "train"):
    """Normalize the columns of a (batch, features) array.

    In train mode the batch statistics are used and the running statistics of
    ``state`` are updated in place by an exponential moving average (running
    variance uses the unbiased batch estimate). In eval mode the running
    statistics are used and ``state`` is left untouched.
    """
    if state.eps <= 0:
        raise ValueError("batch norm epsilon must be positive")
    if mode == "train":
        n = x.shape[0]
        if n < 2:
            raise ValueError("batch norm in train mode needs at least 2 rows")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mean
        state.running_var = (1 - m) * state.running_var + m * var * (n / (n - 1))
    elif mode == "eval":
        mean, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    denom = var + state.eps
    if np.any(denom <= 0):
        raise NumericalError("non-positive variance in batch norm")
    inv_std = 1.0 / np.sqrt(denom)
    x_hat = (x - mean) * inv_std
    out = state.gamma * x_hat + state.beta
    return out, BatchNormCache(mode, x_hat, inv_std, state.gamma)


def batchnorm_backward(grad_out: np.ndarray, cache: BatchNormCache):
    """Gradients of the train-mode forward: (grad_x, grad_gamma, grad_beta)."""
    if cache.mode != "train":
        raise ValueError("batchnorm_backward needs a train-mode cache")
    n = grad_out.shape[0]
    grad_gamma = (grad_out * cache.x_hat).sum(axis=0)
    grad_beta = grad_out.sum(axis=0)
    g = grad_out * cache.gamma
    grad_x = (cache.inv_std / n) * (
        n * g - g.sum(axis=0) - cache.x_hat * (g * cache.x_hat).sum(axis=0)
    )
    return grad_x, grad_gamma, grad_beta


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator | None, mode: str = "train"):
    """Inverted dropout. Returns (output, mask); the mask already carries the
    1/(1-rate) scale so ``grad_x = grad_out * mask``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        mask = np.ones_like(x)
        return x.copy(), mask
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask
