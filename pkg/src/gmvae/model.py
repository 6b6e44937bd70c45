"""Generative and inference networks of the Gaussian mixture VAE.

Generative side: ``y ~ Cat(1/K)``, ``z | y ~ N(prior_z(y))``, ``x | z ~
decode(z)``. Inference side: ``q(y|x)`` and ``q(z|x,y)``, both reading the
output of one shared encoder.

All networks are fully connected::

    shared   x_dim -> hidden_shared                         (relu)
    y_head   hidden_shared -> hidden_y[0] -> hidden_y[1] -> K
    z_head   hidden_shared + K -> hidden_z[0] -> hidden_z[1] -> 2 z_dim
    prior    K -> 2 z_dim                                   (one affine layer)
    decoder  z_dim -> hidden_decoder[0] -> hidden_decoder[1] -> x_dim (x2 for gaussian)

Each forward method takes an optional :class:`~gmvae.tensor.Tape`. With a
tape the parameters are watched and the result is differentiable; without
one the computation runs on constants.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .distributions import (
    CategoricalParams,
    DiagGaussianParams,
    bernoulli_log_likelihood,
    gaussian_log_density,
)
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Parameter, Tape, Tensor

LIKELIHOODS = ("bernoulli", "gaussian")
PIXEL_LOG_VARIANCE_FLOOR = math.log(1e-4)
SIMPLEX_TOL = 1e-6


@dataclass
class GMVAEConfig:
    K: int = 10
    x_dim: int = 784
    z_dim: int = 16
    hidden_shared: int = 512
    hidden_y: list = field(default_factory=lambda: [512, 256])
    hidden_z: list = field(default_factory=lambda: [512, 256])
    hidden_decoder: list = field(default_factory=lambda: [256, 512])
    likelihood: str = "bernoulli"
    temperature: float = 0.3
    decoder_uses_y: bool = False

    def __post_init__(self):
        self.hidden_y = list(self.hidden_y)
        self.hidden_z = list(self.hidden_z)
        self.hidden_decoder = list(self.hidden_decoder)
        self.validate()

    def validate(self) -> None:
        # K = 1 is admitted: it reduces the model to a plain VAE.
        if not isinstance(self.K, int) or self.K < 1:
            raise ConfigError(f"K must be a positive integer, got {self.K!r}")
        for name in ("x_dim", "z_dim", "hidden_shared"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        for name in ("hidden_y", "hidden_z", "hidden_decoder"):
            v = getattr(self, name)
            if len(v) != 2 or any(not isinstance(w, int) or w < 1 for w in v):
                raise ConfigError(f"{name} must be two positive integers, got {v!r}")
        if self.likelihood not in LIKELIHOODS:
            raise ConfigError(f"likelihood must be one of {LIKELIHOODS}, got {self.likelihood!r}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GMVAEConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model fields: {sorted(unknown)}")
        return cls(**d)


def _layer_shapes(cfg: GMVAEConfig) -> dict[str, list[tuple[int, int]]]:
    out_x = cfg.x_dim * (2 if cfg.likelihood == "gaussian" else 1)
    dec_in = cfg.z_dim + (cfg.K if cfg.decoder_uses_y else 0)
    hy, hz, hd = cfg.hidden_y, cfg.hidden_z, cfg.hidden_decoder
    return {
        "shared": [(cfg.x_dim, cfg.hidden_shared)],
        "y_head": [(cfg.hidden_shared, hy[0]), (hy[0], hy[1]), (hy[1], cfg.K)],
        "z_head": [(cfg.hidden_shared + cfg.K, hz[0]), (hz[0], hz[1]), (hz[1], 2 * cfg.z_dim)],
        "prior": [(cfg.K, 2 * cfg.z_dim)],
        "decoder": [(dec_in, hd[0]), (hd[0], hd[1]), (hd[1], out_x)],
    }


class GMVAE:
    """Parameter container plus the five networks of the model.

    ``init`` is ``"glorot"`` (uniform in ``[-a, a]``, ``a = sqrt(6 / (fan_in +
    fan_out))``, zero biases) or ``"zeros"``.
    """

    def __init__(self, config: GMVAEConfig, seed: int = 0, init: str = "glorot"):
        config.validate()
        self.config = config
        self.params: dict[str, Parameter] = {}
        self.layers: dict[str, list[tuple[Parameter, Parameter]]] = {}
        rng = np.random.Generator(np.random.PCG64(seed))
        for net, shapes in _layer_shapes(config).items():
            layers = []
            for i, (fan_in, fan_out) in enumerate(shapes):
                if init == "glorot":
                    a = math.sqrt(6.0 / (fan_in + fan_out))
                    w = rng.uniform(-a, a, size=(fan_in, fan_out))
                elif init == "zeros":
                    w = np.zeros((fan_in, fan_out))
                else:
                    raise ConfigError(f"unknown init {init!r}")
                W = Parameter(f"{net}.{i}.weight", w)
                b = Parameter(f"{net}.{i}.bias", np.zeros(fan_out))
                self.params[W.name] = W
                self.params[b.name] = b
                layers.append((W, b))
            self.layers[net] = layers

    def parameters(self) -> Iterator[Parameter]:
        return iter(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            v = np.asarray(state[name], dtype=np.float64)
            if v.shape != p.value.shape:
                raise DimensionError(f"{name}: expected {p.value.shape}, got {v.shape}")
            p.value[...] = v

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # --- networks -------------------------------------------------------------

    def _mlp(self, net: str, x: Tensor, tape: Tape | None) -> Tensor:
        layers = self.layers[net]
        for i, (W, b) in enumerate(layers):
            if tape is not None:
                x = T.linear(x, tape.watch(W), tape.watch(b))
            else:
                x = T.linear(x, W.value, b.value)
            if i < len(layers) - 1:
                x = T.relu(x)
        return x

    def encode_shared(self, x, tape: Tape | None = None) -> Tensor:
        x = T.tensor(x)
        if x.ndim != 2 or x.shape[1] != self.config.x_dim:
            raise DimensionError(f"expected x of shape [B, {self.config.x_dim}], got {x.shape}")
        return T.relu(self._mlp("shared", x, tape))

    def posterior_y(self, h: Tensor, tape: Tape | None = None) -> CategoricalParams:
        return CategoricalParams(self._mlp("y_head", h, tape))

    def _check_y(self, y: Tensor, rows: int | None = None) -> Tensor:
        y = T.tensor(y)
        if y.ndim != 2 or y.shape[1] != self.config.K or (rows is not None and y.shape[0] != rows):
            raise DimensionError(f"y has shape {y.shape}, expected [B, {self.config.K}]")
        if np.any(y.data < -SIMPLEX_TOL) or np.any(np.abs(y.data.sum(axis=1) - 1.0) > SIMPLEX_TOL):
            raise ContractError("y rows must lie on the probability simplex")
        return y

    def _split_gaussian(self, out: Tensor, d: int) -> DiagGaussianParams:
        return DiagGaussianParams(T.slice_axis(out, 0, d), T.slice_axis(out, d, 2 * d))

    def posterior_z(self, h: Tensor, y, tape: Tape | None = None) -> DiagGaussianParams:
        y = self._check_y(y, h.shape[0])
        out = self._mlp("z_head", T.concat([h, y], axis=1), tape)
        return self._split_gaussian(out, self.config.z_dim)

    def prior_z(self, y, tape: Tape | None = None) -> DiagGaussianParams:
        y = self._check_y(y)
        return self._split_gaussian(self._mlp("prior", y, tape), self.config.z_dim)

    def decode(self, z: Tensor, tape: Tape | None = None, y=None):
        """Bernoulli logits ``[B, x_dim]``, or a :class:`DiagGaussianParams`."""
        cfg = self.config
        if z.ndim != 2 or z.shape[1] != cfg.z_dim:
            raise DimensionError(f"expected z of shape [B, {cfg.z_dim}], got {z.shape}")
        if cfg.decoder_uses_y:
            if y is None:
                raise ContractError("decoder_uses_y is set but no y was given")
            z = T.concat([z, self._check_y(y, z.shape[0])], axis=1)
        out = self._mlp("decoder", z, tape)
        if cfg.likelihood == "bernoulli":
            return out
        mean = T.slice_axis(out, 0, cfg.x_dim)
        log_var = T.maximum(T.slice_axis(out, cfg.x_dim, 2 * cfg.x_dim), PIXEL_LOG_VARIANCE_FLOOR)
        return DiagGaussianParams(mean, log_var)

    def log_likelihood(self, x, decoded) -> Tensor:
        """Per-row ``ln p(x | z)`` for the output of :meth:`decode`."""
        if self.config.likelihood == "bernoulli":
            return bernoulli_log_likelihood(x, decoded)
        return gaussian_log_density(T.tensor(x), decoded)


def discretize_y(q: CategoricalParams | Tensor) -> Tensor:
    """One-hot encoding of the argmax of ``q``; ties go to the lowest index."""
    logits = q.logits if isinstance(q, CategoricalParams) else T.tensor(q)
    data = logits.data
    if data.ndim == 1:
        return T.one_hot(int(np.argmax(data)), data.shape[0])
    return T.one_hot_rows(np.argmax(data, axis=-1), data.shape[-1])
