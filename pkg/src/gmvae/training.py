"""KL-weight schedules, the training loop with early stopping, and evaluation."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset, batch_indices
from .distributions import RngStream, categorical_kl_uniform
from .errors import ConfigError
from .metrics import purity, usage_entropy
from .model import GMVAE, discretize_y
from .objectives import loss_fn
from .optim import AdamState, adam_step

SCHEDULE_KINDS = ("paper-literal", "ramp-exp", "ramp-linear", "constant")
ESTIMATORS = ("marginal", "concrete")

# sub-stream keys for RngStream(seed, key)
_SHUFFLE, _NOISE, _VAL, _EVAL = 1, 2, 3, 4


@dataclass
class KLSchedule:
    """Weight on the y-KL term as a function of the optimizer step ``t``.

    ``paper-literal`` decays as ``min(1, exp(-t/T))``; ``ramp-exp`` rises as
    ``min(1, exp((t - 5T)/T))``; ``ramp-linear`` rises as ``min(1, t/T)``;
    ``constant`` is ``value`` throughout.
    """

    kind: str = "ramp-exp"
    scale: float = 2000.0
    value: float = 1.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"schedule kind must be one of {SCHEDULE_KINDS}, got {self.kind!r}")
        if not self.scale > 0:
            raise ConfigError("schedule scale must be positive")
        if not 0.0 <= self.value <= 1.0:
            raise ConfigError("constant schedule value must lie in [0, 1]")

    def __call__(self, t: int) -> float:
        return kl_weight(self, t)


def kl_weight(schedule: KLSchedule, t: int) -> float:
    if t < 0:
        raise ValueError("step count must be non-negative")
    s = schedule.scale
    if schedule.kind == "paper-literal":
        return min(1.0, math.exp(-t / s))
    if schedule.kind == "ramp-exp":
        return 1.0 if t >= 5.0 * s else math.exp((t - 5.0 * s) / s)
    if schedule.kind == "ramp-linear":
        return min(1.0, t / s)
    return float(schedule.value)


@dataclass
class TrainConfig:
    estimator: str = "concrete"
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    temperature: float | None = None  # None: use the model's temperature
    schedule: KLSchedule = field(default_factory=KLSchedule)
    eval_z_samples: int = 1
    shared_noise: bool = False
    record_timing: bool = True

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = KLSchedule(**self.schedule)
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs and patience must be at least 1")
        if self.eval_z_samples < 1:
            raise ConfigError("eval_z_samples must be at least 1")
        if self.temperature is not None and not self.temperature > 0:
            raise ConfigError("temperature must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    step: int
    train_loss: float
    val_loss: float
    w_t: float
    kl_y: float
    wall_seconds: float


@dataclass
class TrainReport:
    estimator: str
    epochs: list = field(default_factory=list)
    stopping_epoch: int = 0
    best_epoch: int = 0
    best_val_loss: float = math.inf
    total_steps: int = 0
    total_wall_seconds: float = 0.0
    kl_weight_on_y_term: str = "applied to both estimators"
    final_metrics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


class EarlyStopping:
    """Tracks the best validation loss; ``update`` returns True when it is time to stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, loss: float) -> bool:
        if loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = loss, epoch, 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def mean_kl_y(model: GMVAE, features: np.ndarray, chunk: int = 1024) -> float:
    total = 0.0
    for start in range(0, len(features), chunk):
        q = model.posterior_y(model.encode_shared(features[start:start + chunk]))
        total += float(categorical_kl_uniform(q).data.sum())
    return total / len(features)


def validation_loss(model: GMVAE, data: Dataset, config: TrainConfig, epoch: int) -> float:
    """Unweighted (w = 1) loss on ``data`` with the per-epoch validation stream."""
    rng = RngStream(config.seed, (_VAL, epoch))
    tau = config.temperature or model.config.temperature
    objective = loss_fn(config.estimator)
    total = 0.0
    for idx in batch_indices(len(data), max(config.batch_size, 256)):
        loss = objective(model, data.features[idx], rng, tau, 1.0, shared_noise=config.shared_noise)
        total += loss.item() * len(idx)
    return total / len(data)


def train(model: GMVAE, train_data: Dataset, val_data: Dataset, config: TrainConfig,
          log=None) -> TrainReport:
    """Minibatch Adam on the configured estimator with early stopping.

    ``t`` in the KL weight counts optimizer steps from 0. After stopping the
    parameters from the best validation epoch are restored. ``log`` is called
    with each :class:`EpochRecord`.
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise ConfigError("training and validation splits must be non-empty")
    if train_data.dim != model.config.x_dim or val_data.dim != model.config.x_dim:
        raise ConfigError(f"data dimension does not match model x_dim={model.config.x_dim}")
    tau = config.temperature or model.config.temperature
    objective = loss_fn(config.estimator)
    shuffle_rng = RngStream(config.seed, (_SHUFFLE,))
    noise_rng = RngStream(config.seed, (_NOISE,))
    state = AdamState()
    params = list(model.parameters())
    stopper = EarlyStopping(config.patience)
    best_state = model.state_dict()
    report = TrainReport(estimator=config.estimator)
    clock = time.perf_counter if config.record_timing else (lambda: 0.0)
    start = clock()
    t = 0
    w = kl_weight(config.schedule, 0)
    for epoch in range(1, config.max_epochs + 1):
        epoch_start = clock()
        losses = []
        for idx in batch_indices(len(train_data), config.batch_size, True, shuffle_rng):
            w = kl_weight(config.schedule, t)
            tape = T.Tape()
            loss = objective(model, train_data.features[idx], noise_rng, tau, w, tape,
                             shared_noise=config.shared_noise)
            T.backward(loss, params)
            adam_step(params, state, config.learning_rate)
            losses.append(loss.item())
            t += 1
        val = validation_loss(model, val_data, config, epoch)
        record = EpochRecord(epoch, t, float(np.mean(losses)), val, w,
                             mean_kl_y(model, val_data.features), clock() - epoch_start)
        report.epochs.append(record)
        if log is not None:
            log(record)
        stop = stopper.update(epoch, val)
        if stopper.best_epoch == epoch:
            best_state = model.state_dict()
        if stop:
            break
    model.load_state_dict(best_state)
    report.stopping_epoch = len(report.epochs)
    report.best_epoch = stopper.best_epoch
    report.best_val_loss = stopper.best
    report.total_steps = t
    report.total_wall_seconds = clock() - start
    return report


def evaluate(model: GMVAE, data: Dataset, S: int = 1, rng=None, chunk: int = 1024) -> dict:
    """Held-out metrics with y discretised to the argmax of q(y|x).

    ``reconstruction_ll`` is the mean over examples of ``ln p(x|z)`` averaged
    over ``S`` draws ``z ~ q(z|x, y*)``.
    """
    if S < 1:
        raise ConfigError("need at least one z sample")
    if rng is None:
        rng = RngStream(0, (_EVAL,))
    K = model.config.K
    ll_total = kl_total = 0.0
    assignments = []
    for start in range(0, len(data), chunk):
        x = data.features[start:start + chunk]
        h = model.encode_shared(x)
        q = model.posterior_y(h)
        y_star = discretize_y(q)
        qz = model.posterior_z(h, y_star)
        sigma = np.exp(0.5 * qz.log_variance.data)
        ll = np.zeros(len(x))
        for _ in range(S):
            z = qz.mean.data + sigma * rng.standard_normal(qz.mean.shape)
            ll += model.log_likelihood(x, model.decode(T.Tensor(z), y=y_star)).data
        ll_total += float((ll / S).sum())
        kl_total += float(categorical_kl_uniform(q).data.sum())
        assignments.append(np.argmax(y_star.data, axis=1))
    assign = np.concatenate(assignments)
    n = len(data)
    return {
        "n": n,
        "reconstruction_ll": ll_total / n,
        "kl_y": kl_total / n,
        "usage_entropy": usage_entropy(assign, K),
        "purity": None if data.labels is None else purity(assign, data.labels),
        "z_samples": S,
    }
