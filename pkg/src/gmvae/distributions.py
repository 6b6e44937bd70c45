"""Sampling, log-densities and KL terms for the GMVAE's distributions.

Every function accepts either a single vector (shape ``[K]`` / ``[D]``) or a
batch of row vectors (``[B, K]`` / ``[B, D]``); reductions run over the last
axis, so batched inputs give one value per row.

Noise comes from an :class:`RngStream`. Tests pin noise by passing a
:class:`FixedNoise` instead, which has the same interface.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, DomainError
from .tensor import Tensor

LOG_2PI = math.log(2.0 * math.pi)
UNIFORM_CLAMP = 1e-12
PROB_FLOOR = 1e-12
# smallest normal float64; keeps relaxed samples strictly inside the simplex
SIMPLEX_FLOOR = float(np.finfo(np.float64).tiny)


class RngStream:
    """Seeded source of uniform, Gumbel and standard normal noise.

    ``key`` derives an independent stream from the same seed, e.g.
    ``RngStream(seed, (2, epoch))`` for per-epoch validation noise.
    """

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF, *self.key]
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
        self.counter = 0

    def uniform(self, shape) -> np.ndarray:
        out = self._gen.random(shape)
        self.counter += out.size
        return out

    def gumbel(self, shape) -> np.ndarray:
        u = np.clip(self.uniform(shape), UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
        return -np.log(-np.log(u))

    def standard_normal(self, shape) -> np.ndarray:
        """Box-Muller transform of pairs of uniforms."""
        shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # (0, 1]
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        self.counter += n
        return self._gen.permutation(n)

    def bernoulli(self, p: np.ndarray) -> np.ndarray:
        return (self.uniform(np.shape(p)) < p).astype(np.float64)


class FixedNoise:
    """Stand-in for :class:`RngStream` that returns pinned noise.

    ``normal`` and ``gumbel`` are arrays broadcast to each requested shape, or
    callables ``shape -> array``. Unset kinds fall back to ``base`` if given,
    else zeros.
    """

    def __init__(self, normal=None, gumbel=None, base: RngStream | None = None):
        self._normal = normal
        self._gumbel = gumbel
        self.base = base

    def _draw(self, src, shape, fallback):
        if src is None:
            return fallback(shape) if self.base is not None else np.zeros(shape)
        if callable(src):
            return np.asarray(src(shape), dtype=np.float64)
        return np.broadcast_to(np.asarray(src, dtype=np.float64), shape).copy()

    def standard_normal(self, shape) -> np.ndarray:
        return self._draw(self._normal, shape, lambda s: self.base.standard_normal(s))

    def gumbel(self, shape) -> np.ndarray:
        return self._draw(self._gumbel, shape, lambda s: self.base.gumbel(s))

    def uniform(self, shape) -> np.ndarray:
        if self.base is None:
            return np.full(shape, 0.5)
        return self.base.uniform(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.arange(n) if self.base is None else self.base.permutation(n)


@dataclass
class CategoricalParams:
    """Categorical distribution over ``K`` outcomes given by unnormalised logits."""

    logits: Tensor

    @property
    def K(self) -> int:
        return self.logits.shape[-1]

    @property
    def log_probs(self) -> Tensor:
        return T.log_softmax(self.logits, axis=-1)

    @property
    def probs(self) -> Tensor:
        return T.exp(self.log_probs)


@dataclass
class ConcreteSample:
    value: Tensor
    temperature: float


@dataclass
class DiagGaussianParams:
    mean: Tensor
    log_variance: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_variance.shape:
            raise DimensionError(
                f"mean {self.mean.shape} and log_variance {self.log_variance.shape} differ")

    @property
    def variance(self) -> Tensor:
        return T.exp(self.log_variance)


def sample_gumbel(shape, rng) -> Tensor:
    """Standard Gumbel noise ``-log(-log u)`` as a constant tensor."""
    return Tensor(rng.gumbel(shape))


def sample_concrete(logits: Tensor, tau: float, rng) -> ConcreteSample:
    """Relaxed one-hot sample ``softmax((logits + g) / tau)``.

    The Gumbel noise ``g`` is a constant, so the sample is differentiable in
    ``logits``.
    """
    if not tau > 0:
        raise DomainError(f"concrete temperature must be positive, got {tau}")
    logits = T.tensor(logits)
    g = sample_gumbel(logits.shape, rng)
    value = T.softmax((logits + g) * (1.0 / tau), axis=-1)
    return ConcreteSample(T.maximum(value, SIMPLEX_FLOOR), float(tau))


def categorical_kl_uniform(q: CategoricalParams, K: int | None = None) -> Tensor:
    """``KL(q || Cat(1/K)) = ln K + sum_k q_k ln q_k`` per row."""
    if K is not None and K != q.K:
        raise DimensionError(f"K={K} does not match {q.K} logits")
    log_q = q.log_probs
    probs = T.exp(log_q)
    log_q_clamped = T.maximum(log_q, math.log(PROB_FLOOR))
    return T.reduce_sum(probs * log_q_clamped, axis=-1) + math.log(q.K)


def sample_diag_gaussian(p: DiagGaussianParams, rng) -> Tensor:
    """Reparameterised draw ``mean + exp(log_variance / 2) * eps``."""
    eps = Tensor(rng.standard_normal(p.mean.shape))
    return p.mean + T.exp(p.log_variance * 0.5) * eps


def gaussian_log_density(z, p: DiagGaussianParams) -> Tensor:
    z = T.tensor(z)
    if z.shape != p.mean.shape:
        raise DimensionError(f"z {z.shape} does not match mean {p.mean.shape}")
    diff = z - p.mean
    quad = diff * diff * T.exp(-p.log_variance)
    return T.reduce_sum(p.log_variance + quad, axis=-1) * -0.5 - 0.5 * LOG_2PI * z.shape[-1]


def diag_gaussian_kl(q: DiagGaussianParams, p: DiagGaussianParams) -> Tensor:
    if q.mean.shape != p.mean.shape:
        raise DimensionError(f"q {q.mean.shape} and p {p.mean.shape} differ")
    diff = q.mean - p.mean
    ratio = T.exp(q.log_variance - p.log_variance)
    maha = diff * diff * T.exp(-p.log_variance)
    inner = p.log_variance - q.log_variance + ratio + maha - 1.0
    return T.reduce_sum(inner, axis=-1) * 0.5


def bernoulli_log_likelihood(x, mean_logits: Tensor) -> Tensor:
    """``sum_d x_d log sigmoid(l_d) + (1 - x_d) log(1 - sigmoid(l_d))``.

    Evaluated as ``x * l - softplus(l)``, which never overflows.
    """
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if xd.shape != mean_logits.shape:
        raise DimensionError(f"x {xd.shape} does not match logits {mean_logits.shape}")
    if not np.all((xd == 0.0) | (xd == 1.0)):
        raise ContractError("bernoulli likelihood needs binary x")
    return T.reduce_sum(Tensor(xd) * mean_logits - T.softplus(mean_logits), axis=-1)
