"""Config-driven commands behind the ``gmvae`` CLI.

Every command reads one JSON config (schema in ``schemas/config.schema.json``)
and writes its artifacts into an output directory. Files are written to a
temporary name and renamed, so a failed command leaves no partial outputs.

Exit codes: 0 success, 2 invalid config, 3 data or I/O error, 4 checkpoint
error.
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import tensor as T
from .checkpoint import atomic_write, load_checkpoint, save_checkpoint
from .data import (
    Dataset,
    binarize,
    dataset_from_csv,
    dataset_to_csv,
    load_idx_images,
    load_idx_labels,
    split_tail,
    synth_gmm,
)
from .distributions import FixedNoise, RngStream
from .errors import CheckpointError, ConfigError, GMVAEError
from .model import GMVAE, GMVAEConfig
from .objectives import loss_fn
from .optim import AdamState, adam_step
from .training import TrainConfig, evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 2, 3, 4

METRICS_COLUMNS = ["epoch", "step", "train_loss", "val_loss", "w_t", "kl_y"]
BENCH_COLUMNS = ["estimator", "K", "median_ms", "p10_ms", "p90_ms", "steps"]

TRAIN_REPORT = "train_report.json"
TIMING = "timing.json"
METRICS_CSV = "metrics.csv"
CHECKPOINT = "checkpoint.bin"
EVAL_METRICS = "eval_metrics.json"
BENCH_CSV = "bench.csv"
DATASET_CSV = "dataset.csv"
MANIFEST = "manifest.json"

SYNTH_DEFAULTS = {"K": 3, "n_per_cluster": 200, "d": 16, "separation": 10.0, "sigma": 1.0, "seed": 0}


class DataError(GMVAEError):
    """Dataset missing, unreadable or inconsistent with the model."""


def schema(name: str) -> dict:
    """Load a bundled JSON schema by file name."""
    text = resources.files("gmvae").joinpath("schemas").joinpath(name).read_text()
    return json.loads(text)


@dataclass
class RunSpec:
    command: str
    config: dict
    out: Path
    seed: int | None = None


def load_config(path, seed: int | None = None) -> dict:
    """Parse and validate a config file; ``seed`` overrides every seed in it."""
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    validate_config(cfg)
    if seed is not None:
        cfg.setdefault("train", {})["seed"] = seed
        data = cfg.setdefault("data", {"source": "synthetic"})
        if data.get("source") == "synthetic":
            data["seed"] = seed
    return cfg


def validate_config(cfg: dict) -> None:
    errors = sorted(jsonschema.Draft202012Validator(schema("config.schema.json")).iter_errors(cfg),
                    key=lambda e: list(e.absolute_path))
    if errors:
        msgs = []
        for e in errors:
            where = "/".join(str(p) for p in e.absolute_path) or "<root>"
            msgs.append(f"{where}: {e.message}")
        raise ConfigError("; ".join(msgs))


# --- data ---------------------------------------------------------------------

def load_dataset(spec: dict) -> Dataset:
    """Build the dataset described by a config's ``data`` section."""
    source = spec.get("source", "synthetic")
    try:
        if source == "synthetic":
            p = {**SYNTH_DEFAULTS, **{k: v for k, v in spec.items() if k in SYNTH_DEFAULTS}}
            data = synth_gmm(p["K"], p["n_per_cluster"], p["d"], p["separation"], p["sigma"], p["seed"])
        elif source == "csv":
            data = dataset_from_csv(_existing(spec["path"]))
        elif source == "idx":
            data = load_idx_images(_existing(spec["images"]))
            if spec.get("labels"):
                data.labels = load_idx_labels(_existing(spec["labels"]))
                if len(data.labels) != len(data):
                    raise DataError("image and label counts differ")
        else:
            raise ConfigError(f"unknown data source {source!r}")
    except (OSError, ValueError) as exc:
        if isinstance(exc, (ConfigError, DataError)):
            raise
        raise DataError(str(exc)) from None
    limit = spec.get("limit")
    if limit:
        data = data.subset(slice(0, limit))
    mode = spec.get("binarize")
    if mode:
        rng = RngStream(spec.get("binarize_seed", 0))
        data.features = binarize(data.features, mode, spec.get("threshold", 0.5), rng)
    return data


def _existing(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"dataset file not found: {p}")
    return p


def split_dataset(data: Dataset, spec: dict) -> tuple[Dataset, Dataset, Dataset]:
    """Tail splits: test = last ``test_fraction``; val = last ``val_fraction`` of the rest."""
    test_fraction = spec.get("test_fraction", 0.2)
    val_fraction = spec.get("val_fraction", 0.1)
    if test_fraction > 0:
        rest, test = split_tail(data, test_fraction)
    else:
        rest, test = data, data
    train_part, val = split_tail(rest, val_fraction)
    return train_part, val, test


def model_config(cfg: dict, data: Dataset) -> GMVAEConfig:
    m = dict(cfg.get("model", {}))
    m.setdefault("x_dim", data.dim)
    if m["x_dim"] != data.dim:
        raise DataError(f"model x_dim={m['x_dim']} but data has {data.dim} columns")
    return GMVAEConfig.from_dict(m)


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict(dict(cfg.get("train", {})))


def _prepare_out(out) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    if not out.is_dir():
        raise DataError(f"output path {out} is not a directory")
    return out


def _write(path: Path, data) -> None:
    try:
        atomic_write(path, data)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from None


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n"


def _default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serialisable: {type(o)}")


# --- commands -----------------------------------------------------------------

def cmd_gen_data(cfg: dict, out) -> dict:
    spec = {**SYNTH_DEFAULTS, **cfg.get("data", {})}
    spec.pop("source", None)
    data = load_dataset({"source": "synthetic", **spec})
    out = _prepare_out(out)
    manifest = {"generator": "synth_gmm", **{k: spec[k] for k in SYNTH_DEFAULTS},
                "rows": len(data), "columns": data.dim,
                "offset": data.meta["offset"], "scale": data.meta["scale"],
                "means": data.meta["means"]}
    _write(out / DATASET_CSV, dataset_to_csv(data))
    _write(out / MANIFEST, _json(manifest))
    return manifest


def metrics_csv(report) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_COLUMNS)
    for r in report.epochs:
        writer.writerow([r.epoch, r.step, repr(r.train_loss), repr(r.val_loss), repr(r.w_t),
                         repr(r.kl_y)])
    return buf.getvalue()


def split_timing(report_dict: dict) -> tuple[dict, dict]:
    """Separate wall-clock fields from a report so the rest is reproducible bit for bit."""
    doc = dict(report_dict)
    epochs = [dict(e) for e in doc.pop("epochs")]
    timing = {"total_wall_seconds": doc.pop("total_wall_seconds"),
              "epochs": [{"epoch": e["epoch"], "wall_seconds": e.pop("wall_seconds")} for e in epochs]}
    doc["epochs"] = epochs
    return doc, timing


def cmd_train(cfg: dict, out, log=print) -> dict:
    """Train, evaluate on the held-out split, and write report, CSV, timing and checkpoint.

    ``train_report.json`` and ``metrics.csv`` hold no wall-clock values, so a
    rerun with the same config and seed reproduces them byte for byte. Wall
    times go to ``timing.json``.
    """
    data = load_dataset(cfg.get("data", {"source": "synthetic"}))
    train_part, val, test = split_dataset(data, cfg.get("split", {}))
    mcfg = model_config(cfg, data)
    tcfg = _train_config(cfg)
    out = _prepare_out(out)
    model = GMVAE(mcfg, seed=tcfg.seed, init=cfg.get("init", "glorot"))

    def line(r):
        if log is not None:
            log(f"epoch {r.epoch:4d} step {r.step:6d} train {r.train_loss:.4f} "
                f"val {r.val_loss:.4f} w {r.w_t:.4f} kl_y {r.kl_y:.4f}")

    report = train(model, train_part, val, tcfg, log=line)
    ecfg = cfg.get("eval", {})
    report.final_metrics = _evaluate(model, test, ecfg, tcfg.eval_z_samples, tcfg.seed)
    body, timing = split_timing(report.to_dict())
    doc = {"config": {"model": mcfg.to_dict(), "train": tcfg.to_dict()},
           "dataset": {"name": data.name, "rows": len(data), "train": len(train_part),
                       "val": len(val), "test": len(test)},
           **body}
    _write(out / METRICS_CSV, metrics_csv(report))
    _write(out / TRAIN_REPORT, _json(doc))
    _write(out / TIMING, _json(timing))
    try:
        save_checkpoint(model, out / CHECKPOINT)
    except OSError as exc:
        raise DataError(f"cannot write checkpoint: {exc}") from None
    return doc


def _evaluate(model: GMVAE, data: Dataset, ecfg: dict, default_s: int, seed: int) -> dict:
    S = ecfg.get("z_samples", default_s)
    rng = FixedNoise() if ecfg.get("noise") == "zero" else RngStream(seed, (4,))
    return evaluate(model, data, S=S, rng=rng)


def cmd_eval(cfg: dict, out, checkpoint=None) -> dict:
    """Evaluate a checkpoint on the held-out split and write ``eval_metrics.json``."""
    out = Path(out)
    ecfg = cfg.get("eval", {})
    ckpt = Path(checkpoint or ecfg.get("checkpoint") or out / CHECKPOINT)
    model = load_checkpoint(ckpt)
    expected = cfg.get("model", {})
    for key in ("K", "x_dim", "z_dim", "likelihood", "decoder_uses_y"):
        if key in expected and expected[key] != getattr(model.config, key):
            raise CheckpointError(f"checkpoint {key}={getattr(model.config, key)!r} "
                                  f"but config has {expected[key]!r}")
    data = load_dataset(cfg.get("data", {"source": "synthetic"}))
    if data.dim != model.config.x_dim:
        raise CheckpointError(f"checkpoint x_dim={model.config.x_dim} but data has {data.dim} columns")
    which = ecfg.get("split", "test")
    if which == "test":
        _, _, data = split_dataset(data, cfg.get("split", {}))
    tcfg = cfg.get("train", {})
    metrics = _evaluate(model, data, ecfg, tcfg.get("eval_z_samples", 1), tcfg.get("seed", 0))
    metrics["checkpoint"] = str(ckpt.name)
    metrics["split"] = which
    out = _prepare_out(out)
    _write(out / EVAL_METRICS, _json(metrics))
    return metrics


# --- benchmark ----------------------------------------------------------------

@dataclass
class BenchRow:
    estimator: str
    K: int
    median_ms: float
    p10_ms: float
    p90_ms: float
    steps: int


@dataclass
class BenchResult:
    rows: list = field(default_factory=list)

    def row(self, estimator: str, K: int) -> BenchRow:
        for r in self.rows:
            if r.estimator == estimator and r.K == K:
                return r
        raise KeyError((estimator, K))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(BENCH_COLUMNS)
        for r in self.rows:
            writer.writerow([r.estimator, r.K, f"{r.median_ms:.6f}", f"{r.p10_ms:.6f}",
                             f"{r.p90_ms:.6f}", r.steps])
        return buf.getvalue()


BENCH_DEFAULTS = {"K_values": [2, 5, 10, 20, 40], "estimators": ["marginal", "concrete"],
                  "x_dim": 64, "z_dim": 16, "batch_size": 64, "warmup": 10, "steps": 30,
                  "seed": 0}


def time_steps(model: GMVAE, x: np.ndarray, estimator: str, warmup: int, steps: int,
               seed: int = 0) -> np.ndarray:
    """Milliseconds per optimizer step (forward, backward, Adam) after warm-up."""
    objective = loss_fn(estimator)
    params = list(model.parameters())
    state = AdamState()
    rng = RngStream(seed, (5,))
    tau = model.config.temperature
    times = []
    for i in range(warmup + steps):
        t0 = time.perf_counter()
        tape = T.Tape()
        loss = objective(model, x, rng, tau, 1.0, tape)
        T.backward(loss, params)
        adam_step(params, state, 1e-3)
        if i >= warmup:
            times.append((time.perf_counter() - t0) * 1e3)
    return np.asarray(times)


def run_bench(spec: dict | None = None, log=None) -> BenchResult:
    """Per-step wall time of each estimator across cluster counts.

    Cells run sequentially in this process, each on a fresh model and fresh
    synthetic data with ``x_dim`` features.
    """
    p = {**BENCH_DEFAULTS, **(spec or {})}
    ks = sorted(set(p["K_values"]))
    if len(ks) < 2:
        raise ConfigError("benchmark needs at least two K values")
    if p["steps"] < 30:
        raise ConfigError("benchmark needs at least 30 timed steps")
    model_fields = {k: v for k, v in p.get("model", {}).items()}
    result = BenchResult()
    for estimator in p["estimators"]:
        for K in ks:
            n = max(1, math.ceil(p["batch_size"] / K))
            data = synth_gmm(max(K, 2), n, p["x_dim"], 10.0, 1.0, p["seed"])
            x = data.features[:p["batch_size"]]
            cfg = GMVAEConfig(**{**model_fields, "K": K, "x_dim": p["x_dim"], "z_dim": p["z_dim"],
                                 "likelihood": "gaussian"})
            model = GMVAE(cfg, seed=p["seed"])
            ms = time_steps(model, x, estimator, p["warmup"], p["steps"], p["seed"])
            lo, mid, hi = np.percentile(ms, [10, 50, 90])
            row = BenchRow(estimator, K, float(mid), float(lo), float(hi), len(ms))
            result.rows.append(row)
            if log is not None:
                log(f"{estimator:9s} K={K:3d} median {mid:8.2f} ms  p10 {lo:8.2f}  p90 {hi:8.2f}")
    return result


def cmd_bench(cfg: dict, out, log=print) -> BenchResult:
    spec = cfg.get("bench", {})
    out = _prepare_out(out)
    result = run_bench(spec, log=log)
    _write(out / BENCH_CSV, result.to_csv())
    return result
