"""Diagonal Gaussian calculus on autodiff tensors.

All functions reduce over the last axis, so they work on single vectors and
on batches of row vectors alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import LOG_STD_MAX, LOG_STD_MIN

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class DiagGaussian:
    mean: Tensor
    log_std: Tensor

    def __post_init__(self):
        self.mean = ad.as_tensor(self.mean)
        self.log_std = ad.as_tensor(self.log_std)
        if self.mean.shape != self.log_std.shape:
            raise ad.ShapeError(f"mean {self.mean.shape} vs log_std {self.log_std.shape}")

    @classmethod
    def from_output(cls, out: Tensor) -> "DiagGaussian":
        """Split a network output ``[mean, log_std]`` and clamp the log-std."""
        k = out.shape[-1] // 2
        return cls(out[..., :k], ad.clip(out[..., k:], LOG_STD_MIN, LOG_STD_MAX))

    @classmethod
    def standard(cls, dim: int, batch: int | None = None) -> "DiagGaussian":
        shape = (dim,) if batch is None else (batch, dim)
        return cls(np.zeros(shape), np.zeros(shape))

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std.data)

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.log_std.detach())

    def entropy(self) -> np.ndarray:
        return np.sum(0.5 + HALF_LOG_2PI + self.log_std.data, axis=-1)


def _check(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise ad.ShapeError(f"{what}: dimension {a.shape} vs {b.shape}")


def gaussian_log_prob(g: DiagGaussian, x) -> Tensor:
    x = ad.as_tensor(x)
    _check(g.mean, x, "gaussian_log_prob")
    z = (x - g.mean) * ad.exp(-g.log_std)
    per_dim = -0.5 * ad.square(z) - g.log_std - HALF_LOG_2PI
    return ad.sum(per_dim, axis=-1)


def gaussian_kl(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) in closed form, summed over the last axis."""
    _check(q.mean, p.mean, "gaussian_kl")
    var_ratio = ad.exp(2.0 * (q.log_std - p.log_std))
    mean_term = ad.square(q.mean - p.mean) * ad.exp(-2.0 * p.log_std)
    per_dim = p.log_std - q.log_std + 0.5 * (var_ratio + mean_term) - 0.5
    return ad.sum(per_dim, axis=-1)


def gaussian_rsample(g: DiagGaussian, noise) -> Tensor:
    """Reparameterized draw ``mean + std * noise``; noise comes from N(0, I)."""
    noise = ad.as_tensor(noise)
    if noise.shape != g.mean.shape:
        raise ad.ShapeError(f"noise {noise.shape} vs mean {g.mean.shape}")
    return g.mean + ad.exp(g.log_std) * noise
