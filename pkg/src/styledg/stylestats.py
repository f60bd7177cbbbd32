"""Per-channel style statistics and the normalization family built on them.

"Style" here is the per-channel (mean, std) pair of an image or feature
map; everything in this module either measures it (``channel_stats``,
``gram_matrix``) or rewrites it (``instance_norm``, ``adain``, ``srm_il``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

# Shared stability constant for every place channel statistics appear.
EPS = 1e-5


@dataclass
class StyleStats:
    """Per-channel mean and epsilon-stabilized std, shape [C] or [B,C]."""

    mean: np.ndarray
    std: np.ndarray
    epsilon: float = EPS

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape:
            raise ValueError(f"mean/std shapes differ: {self.mean.shape} vs {self.std.shape}")
        if np.any(self.std < np.sqrt(self.epsilon) * (1 - 1e-12)):
            raise ValueError("std below its sqrt(epsilon) floor")


@dataclass
class SrmIlConfig:
    """Sampling range for image-level style randomization.

    The sampling set spans the representable pixel range [x_min, x_max];
    sampled stds start at ``sigma_floor`` because a zero std would erase
    the content entirely.
    """

    x_min: float = 0.0
    x_max: float = 255.0
    sigma_floor: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if not self.x_min < self.x_max:
            raise ValueError(f"x_min must be < x_max, got [{self.x_min}, {self.x_max}]")
        if self.sigma_floor <= 0:
            raise ValueError("sigma_floor must be positive")


def _as4d(x: Tensor) -> Tuple[Tensor, bool]:
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected [C,H,W] or [B,C,H,W], got {x.shape}")


def instance_stats(x: Tensor, eps: float = EPS) -> Tuple[Tensor, Tensor]:
    """Differentiable per-instance, per-channel (mean, std) as [B,C,1,1] tensors."""
    x4, _ = _as4d(x)
    b, c, h, w = x4.shape
    if h * w < 1:
        raise ValueError("empty spatial extent")
    mu = T.reduce_mean(x4, axes=(2, 3), keepdims=True)
    centered = T.sub(x4, T.expand(mu, x4.shape))
    var = T.reduce_mean(T.mul(centered, centered), axes=(2, 3), keepdims=True)
    std = T.sqrt(T.add(var, eps))
    return mu, std


def channel_stats(x, eps: float = EPS) -> StyleStats:
    """Population-variance channel statistics of an image or feature map.

    Accepts a Tensor or ndarray shaped [C,H,W] or [B,C,H,W]; returns
    plain-value stats shaped [C] or [B,C].
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    squeeze = arr.ndim == 3
    if squeeze:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected [C,H,W] or [B,C,H,W], got {arr.shape}")
    if arr.shape[2] * arr.shape[3] < 1:
        raise ValueError("empty spatial extent")
    mean = arr.mean(axis=(2, 3))
    var = arr.var(axis=(2, 3))  # population variance, 1/(H*W)
    std = np.sqrt(var + eps)
    if squeeze:
        mean, std = mean[0], std[0]
    return StyleStats(mean=mean, std=std, epsilon=eps)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = EPS) -> Tensor:
    """Standardize each instance's channels, then apply a learnable affine pair."""
    x4, squeeze = _as4d(x)
    c = x4.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"affine vectors must be [{c}], got {gamma.shape} and {beta.shape}")
    normed = T.instance_normalize(x4, eps)
    g = T.expand(T.reshape(gamma, (1, c, 1, 1)), x4.shape)
    b = T.expand(T.reshape(beta, (1, c, 1, 1)), x4.shape)
    out = T.add(T.mul(g, normed), b)
    return T.reshape(out, x.shape) if squeeze else out


def adain(x_c: Tensor, x_ref: Tensor, eps: float = EPS) -> Tensor:
    """Re-style ``x_c`` with the channel statistics of ``x_ref``.

    Spatial extents may differ; channel (and batch) counts must match.
    """
    c4, squeeze = _as4d(x_c)
    r4, _ = _as4d(x_ref)
    if c4.shape[:2] != r4.shape[:2]:
        raise ValueError(f"channel mismatch: {x_c.shape} vs {x_ref.shape}")
    mu_r, std_r = instance_stats(r4, eps)
    normed = T.instance_normalize(c4, eps)
    out = T.add(T.mul(T.expand(std_r, c4.shape), normed), T.expand(mu_r, c4.shape))
    return T.reshape(out, x_c.shape) if squeeze else out


def gram_matrix(x: Tensor) -> Tensor:
    """Channel inner-product matrix of a [C,H,W] map, scaled by 1/(H*W)."""
    if x.ndim != 3:
        raise ValueError(f"gram_matrix expects [C,H,W], got {x.shape}")
    c, h, w = x.shape
    if h * w < 1:
        raise ValueError("empty spatial extent")
    m = T.reshape(x, (c, h * w))
    return T.mul(T.matmul(m, T.transpose(m)), 1.0 / (h * w))


def srm_il(image: Tensor, cfg: SrmIlConfig, rng: Optional[np.random.Generator] = None,
           mu: Optional[float] = None, sigma: Optional[float] = None,
           eps: float = EPS) -> Tuple[Tensor, StyleStats]:
    """Replace an image's global (mean, std) with a randomly sampled pair.

    Operates on the raw intensity scale.  ``mu``/``sigma`` override the
    sampling (test hook / identity checks).  The output is a strictly
    monotone affine map of the input, so content ordering is preserved;
    no clamping is applied.
    """
    if image.ndim != 3 or image.shape[0] != 1:
        raise ValueError(f"srm_il expects a [1,H,W] image, got {image.shape}")
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    if mu is None:
        mu = float(rng.uniform(cfg.x_min, cfg.x_max))
    if sigma is None:
        sigma = float(rng.uniform(cfg.sigma_floor, cfg.x_max))

    arr = image.data
    m = float(arr.mean())
    s = float(np.sqrt(arr.var() + eps))
    out = sigma * (arr - m) / s + mu
    return Tensor(out), StyleStats(mean=np.array([mu]), std=np.array([max(sigma, np.sqrt(eps))]), epsilon=eps)
