"""Convolution and batch-normalization layers.

Batch norm runs in one of three regimes:

* ``TrainSource(eta)`` normalizes with the current batch statistics and folds
  them into the running estimates as an exponential moving average.
* ``Eval()`` normalizes with the stored running statistics and changes
  nothing.
* ``AdaptTarget(eta_t)`` blends the current target batch statistics with the
  frozen source snapshot, ``(1 - eta_t) * batch + eta_t * source``, normalizes
  with the blend and stores it as the running statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


def _check_momentum(name: str, value: float) -> None:
    if not (0.0 <= value <= 1.0):
        raise ValueError(f"{name} must lie in [0, 1], got {value}")


@dataclass(frozen=True)
class TrainSource:
    eta: float = 0.1

    def __post_init__(self):
        _check_momentum("eta", self.eta)


@dataclass(frozen=True)
class Eval:
    pass


@dataclass(frozen=True)
class AdaptTarget:
    eta_t: float

    def __post_init__(self):
        _check_momentum("eta_t", self.eta_t)


BNMode = Union[TrainSource, Eval, AdaptTarget]


def emd_momentum(t: float, eta0: float, tau: float = 1.0) -> float:
    """Exponentially decayed adaptation momentum ``eta0 * exp(-t / tau)``."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if t < 0:
        raise ValueError(f"iteration must be non-negative, got {t}")
    _check_momentum("eta0", eta0)
    return eta0 * math.exp(-t / tau)


def update_running_source(running_mean, running_var, batch_mean, batch_var, eta: float):
    """One EMA step of the running statistics. Returns the new (mean, var)."""
    _check_momentum("eta", eta)
    batch_var = np.asarray(batch_var)
    if np.any(batch_var < 0):
        raise ValueError("batch variance must be non-negative")
    mean = (1.0 - eta) * np.asarray(running_mean) + eta * np.asarray(batch_mean)
    var = (1.0 - eta) * np.asarray(running_var) + eta * batch_var
    return mean, var


def blend_target(batch_mean, batch_var, source_mean, source_var, eta_t: float):
    """Convex blend of target batch statistics with the source snapshot."""
    _check_momentum("eta_t", eta_t)
    mean = (1.0 - eta_t) * np.asarray(batch_mean) + eta_t * np.asarray(source_mean)
    var = (1.0 - eta_t) * np.asarray(batch_var) + eta_t * np.asarray(source_var)
    return mean, var


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.array(a, copy=True)
    out.setflags(write=False)
    return out


class BatchNorm2d:
    """Per-channel batch normalization over the last axis of an NHWC tensor.

    Holds the learnable ``gamma``/``beta``, the running statistics, and the
    source snapshot captured by :meth:`freeze_source`.
    """

    def __init__(self, channels: int, eps: float = 1e-5, dtype=np.float64) -> None:
        if eps <= 0:
            raise ValueError(f"eps must be positive, got {eps}")
        self.channels = channels
        self.eps = float(eps)
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.source_mean: np.ndarray | None = None
        self.source_var: np.ndarray | None = None
        self.source_gamma: np.ndarray | None = None
        self.source_beta: np.ndarray | None = None
        # raw statistics of the most recent stats-computing forward pass
        self.last_batch_mean: np.ndarray | None = None
        self.last_batch_var: np.ndarray | None = None

    @property
    def frozen(self) -> bool:
        return self.source_mean is not None

    def params(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def freeze_source(self) -> None:
        if self.frozen:
            raise RuntimeError("source snapshot already frozen")
        self.set_source(self.running_mean, self.running_var, self.gamma.data, self.beta.data)

    def set_source(self, mean, var, gamma, beta) -> None:
        """Install a source snapshot directly (checkpoint restore)."""
        self.source_mean = _frozen(mean)
        self.source_var = _frozen(var)
        self.source_gamma = _frozen(gamma)
        self.source_beta = _frozen(beta)

    def _normalize(self, x: Tensor, mean, var) -> Tensor:
        # one code path for every regime, so the endpoint equivalences are exact
        inv = T.div(1.0, T.sqrt(T.add(var, self.eps)))
        return T.add(T.mul(T.mul(T.sub(x, mean), inv), self.gamma), self.beta)

    def __call__(self, x: Tensor, mode: BNMode) -> Tensor:
        return self.forward(x, mode)

    def forward(self, x: Tensor, mode: BNMode) -> Tensor:
        x = T.as_tensor(x)
        if x.data.ndim != 4 or x.shape[-1] != self.channels:
            raise ShapeError("batch_norm", x.shape, (self.channels,), detail="expected NHWC input with matching channels")
        if x.shape[0] < 1:
            raise ValueError("batch norm needs at least one sample")
        if isinstance(mode, Eval):
            mean = Tensor(self.running_mean)
            var = Tensor(self.running_var)
            return self._normalize(x, mean, var)

        n = x.shape[0] * x.shape[1] * x.shape[2]
        if n < 2:
            raise ValueError(f"batch statistics need at least 2 values per channel, got {n}")
        mu = T.channel_mean(x)
        var = T.channel_var(x)
        self.last_batch_mean = mu.data.copy()
        self.last_batch_var = var.data.copy()

        if isinstance(mode, TrainSource):
            out = self._normalize(x, mu, var)
            self.running_mean, self.running_var = update_running_source(
                self.running_mean, self.running_var, mu.data, var.data, mode.eta
            )
            return out

        if isinstance(mode, AdaptTarget):
            if not self.frozen:
                raise RuntimeError("AdaptTarget needs a frozen source snapshot")
            w = mode.eta_t
            m = T.add(T.scale(mu, 1.0 - w), Tensor(w * self.source_mean))
            v = T.add(T.scale(var, 1.0 - w), Tensor(w * self.source_var))
            out = self._normalize(x, m, v)
            self.running_mean = m.data.copy()
            self.running_var = v.data.copy()
            return out

        raise TypeError(f"unknown batch-norm mode {mode!r}")


class Conv2d:
    """Same-padded convolution with uniform fan-in initialization."""

    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, rng: np.random.Generator | None = None, dtype=np.float64):
        if k % 2 == 0:
            raise ValueError("kernel size must be odd")
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = math.sqrt(1.0 / (k * k * cin))
        self.weight = Tensor(rng.uniform(-bound, bound, size=(k, k, cin, cout)).astype(dtype), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, size=(cout,)).astype(dtype), requires_grad=True)

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride)


relu = T.relu
upsample2x = T.upsample2x
softmax_channels = T.softmax_channels


def conv2d(x, weights, bias=None, stride: int = 1) -> Tensor:
    return T.conv2d(x, weights, bias, stride=stride)
