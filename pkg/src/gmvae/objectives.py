"""Negative-ELBO training losses.

``elbo_marginal`` sums the integrand over every cluster id, so each step
costs K passes through the z-head, prior and decoder. ``elbo_concrete``
replaces the sum with one relaxed sample of y and costs one pass regardless
of K.

In both, the y-term is the exact categorical ``KL(q(y|x) || Cat(1/K))``,
scaled by the annealing weight ``w``. Losses are batch means.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .distributions import (
    CategoricalParams,
    categorical_kl_uniform,
    gaussian_log_density,
    sample_concrete,
)
from .errors import DomainError
from .model import GMVAE
from .tensor import Tape, Tensor


def _reparam(qz, eps: np.ndarray) -> Tensor:
    return qz.mean + T.exp(qz.log_variance * 0.5) * Tensor(eps)


def _path(model: GMVAE, x: Tensor, h: Tensor, y, eps: np.ndarray, tape) -> Tensor:
    """``ln p(z|y) - ln q(z|x,y) + ln p(x|z)`` per row, with z drawn via ``eps``."""
    qz = model.posterior_z(h, y, tape)
    z = _reparam(qz, eps)
    pz = model.prior_z(y, tape)
    decoded = model.decode(z, tape, y=y)
    return gaussian_log_density(z, pz) - gaussian_log_density(z, qz) + model.log_likelihood(x, decoded)


def component_terms(model: GMVAE, x, rng, tape: Tape | None = None,
                    shared_noise: bool = False) -> tuple[CategoricalParams, Tensor]:
    """q(y|x) and the ``[B, K]`` matrix of per-cluster integrand values.

    Column k uses the one-hot ``y = e_k`` and its own z draw (one draw per
    component, fresh noise each unless ``shared_noise``).
    """
    x = T.tensor(x)
    B, K, zd = x.shape[0], model.config.K, model.config.z_dim
    h = model.encode_shared(x, tape)
    q = model.posterior_y(h, tape)
    shared = rng.standard_normal((B, zd)) if shared_noise else None
    cols = []
    for k in range(K):
        y = T.one_hot_rows(np.full(B, k), K)
        eps = shared if shared_noise else rng.standard_normal((B, zd))
        cols.append(T.reshape(_path(model, x, h, y, eps, tape), (B, 1)))
    return q, T.concat(cols, axis=1)


def elbo_marginal(model: GMVAE, x, rng, w: float = 1.0, tape: Tape | None = None,
                  shared_noise: bool = False) -> Tensor:
    """Scalar negative ELBO with y summed out exactly."""
    q, terms = component_terms(model, x, rng, tape, shared_noise)
    per_row = T.reduce_sum(q.probs * terms, axis=1)
    if w != 0.0:
        per_row = per_row - categorical_kl_uniform(q) * w
    return -T.reduce_mean(per_row)


def elbo_concrete(model: GMVAE, x, rng, tau: float, w: float = 1.0,
                  tape: Tape | None = None) -> Tensor:
    """Scalar negative ELBO from one ancestral sample with a relaxed y."""
    if not tau > 0:
        raise DomainError(f"concrete temperature must be positive, got {tau}")
    x = T.tensor(x)
    h = model.encode_shared(x, tape)
    q = model.posterior_y(h, tape)
    y = sample_concrete(q.logits, tau, rng).value
    eps = rng.standard_normal((x.shape[0], model.config.z_dim))
    per_row = _path(model, x, h, y, eps, tape)
    if w != 0.0:
        per_row = per_row - categorical_kl_uniform(q) * w
    return -T.reduce_mean(per_row)


def loss_fn(estimator: str):
    """Uniform ``(model, x, rng, tau, w, tape) -> loss`` signature for either estimator."""
    if estimator == "marginal":
        return lambda model, x, rng, tau, w, tape=None, **kw: elbo_marginal(model, x, rng, w, tape, **kw)
    if estimator == "concrete":
        return lambda model, x, rng, tau, w, tape=None, **kw: elbo_concrete(model, x, rng, tau, w, tape)
    raise ValueError(f"unknown estimator {estimator!r}")
