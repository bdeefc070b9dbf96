"""
Training Losses Module

- pseudo_huber: sqrt(r^2 + c^2) - c on the RMS residual r (or on the plain L2
  norm when normalize=False)
- perceptual_distance: distance between unit-normalized features of a fixed,
  seeded three-layer convolutional pyramid (a deterministic stand-in for a
  learned perceptual metric)
- combined_loss: alpha * pseudo-Huber + beta * perceptual

Usage:
    cfg = LossConfig(alpha=0.8, beta=0.2, c=0.03)
    terms = loss_terms(gt, prediction, cfg)
    terms.total.backward()
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import List, Tuple

import numpy as np

from ..tensor import ops
from ..tensor.tensor import Tensor, as_tensor
from ..utils.errors import ConfigurationError, ShapeError

LOSS_MODES = ("both", "phuber", "lpips")

# Feature pyramid layout: (in, out) channels per layer, 3x3 kernels.
PYRAMID_CHANNELS: Tuple[Tuple[int, int], ...] = ((1, 8), (8, 16), (16, 16))
PYRAMID_SEED = 20240521
FEATURE_EPS = 1e-10


@dataclass
class LossConfig:
    alpha: float = 0.8
    beta: float = 0.2
    c: float = 0.03
    mode: str = "both"
    normalize: bool = True

    def __post_init__(self) -> None:
        if self.c <= 0:
            raise ConfigurationError("pseudo-Huber c must be positive", c=self.c)
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError("loss weights must be non-negative", alpha=self.alpha, beta=self.beta)
        if self.mode not in LOSS_MODES:
            raise ConfigurationError("unknown loss mode", mode=self.mode, allowed=LOSS_MODES)
        alpha, beta = self.weights()
        if alpha + beta <= 0:
            raise ConfigurationError("at least one loss weight must be positive",
                                     alpha=alpha, beta=beta, mode=self.mode)

    def weights(self) -> Tuple[float, float]:
        """Effective (alpha, beta) after applying the loss mode."""
        if self.mode == "phuber":
            return self.alpha, 0.0
        if self.mode == "lpips":
            return 0.0, self.beta
        return self.alpha, self.beta


@dataclass
class LossTerms:
    total: Tensor
    phuber: Tensor
    perceptual: Tensor

    def values(self) -> Tuple[float, float, float]:
        return self.total.item(), self.phuber.item(), self.perceptual.item()


def _check_pair(y: Tensor, i_hat: Tensor) -> None:
    if y.shape != i_hat.shape:
        raise ShapeError("loss operands must have equal shapes", y=y.shape, i_hat=i_hat.shape)


def pseudo_huber(y, i_hat, c: float = 0.03, normalize: bool = True) -> Tensor:
    if c <= 0:
        raise ConfigurationError("pseudo-Huber c must be positive", c=c)
    y, i_hat = as_tensor(y), as_tensor(i_hat)
    _check_pair(y, i_hat)
    diff = ops.sub(i_hat, y)
    squared = ops.mul(diff, diff)
    energy = ops.mean(squared) if normalize else ops.sum(squared)
    return ops.sub(ops.sqrt(ops.add(energy, c * c)), c)


@lru_cache(maxsize=4)
def pyramid_kernels(seed: int = PYRAMID_SEED) -> Tuple[np.ndarray, ...]:
    """Zero-mean 3x3 kernels, scaled by 1/sqrt(fan_in), fixed by the seed."""
    rng = np.random.default_rng(seed)
    kernels = []
    for c_in, c_out in PYRAMID_CHANNELS:
        w = rng.standard_normal((c_out, c_in, 3, 3))
        w -= w.mean(axis=(1, 2, 3), keepdims=True)
        kernels.append(w / np.sqrt(c_in * 9))
    return tuple(kernels)


def _unit_normalize(features: Tensor) -> Tensor:
    norm = ops.sqrt(ops.add(ops.sum(ops.mul(features, features), axis=1, keepdims=True), FEATURE_EPS))
    return ops.div(features, norm)


def pyramid_features(x: Tensor) -> List[Tensor]:
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError("perceptual features expect B x 1 x H x W", got=x.shape)
    features = []
    h = x
    for i, w in enumerate(pyramid_kernels()):
        if i:
            h = ops.subsample(h, 2)
        zero_bias = np.zeros(w.shape[0], dtype=x.dtype)
        h = ops.gelu(ops.conv2d(h, w.astype(x.dtype), zero_bias, pad=1))
        features.append(_unit_normalize(h))
    return features


def perceptual_distance(y, i_hat) -> Tensor:
    y, i_hat = as_tensor(y), as_tensor(i_hat)
    _check_pair(y, i_hat)
    total = None
    layers = list(zip(pyramid_features(y), pyramid_features(i_hat)))
    for fy, fx in layers:
        diff = ops.sub(fy, fx)
        term = ops.mean(ops.mul(diff, diff))
        total = term if total is None else ops.add(total, term)
    return ops.div(total, float(len(layers)))


def loss_terms(y, i_hat, cfg: LossConfig) -> LossTerms:
    y, i_hat = as_tensor(y), as_tensor(i_hat)
    alpha, beta = cfg.weights()
    phuber = pseudo_huber(y, i_hat, cfg.c, cfg.normalize)
    if beta > 0:
        perceptual = perceptual_distance(y, i_hat)
        total = ops.add(ops.mul(phuber, alpha), ops.mul(perceptual, beta))
    else:
        perceptual = Tensor(np.zeros((), dtype=phuber.dtype))
        total = ops.mul(phuber, alpha)
    return LossTerms(total=total, phuber=phuber, perceptual=perceptual)


def combined_loss(y, i_hat, cfg: LossConfig) -> Tensor:
    return loss_terms(y, i_hat, cfg).total
