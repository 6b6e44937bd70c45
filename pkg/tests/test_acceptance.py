"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in
the terminal summary under "acceptance criteria".
"""
import json
import math
import os
import time
import zlib
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from gmvae import tensor as T
from gmvae.cli import main
from gmvae.data import binarize, load_idx_images, split_tail, synth_gmm
from gmvae.distributions import (
    CategoricalParams,
    DiagGaussianParams,
    FixedNoise,
    RngStream,
    bernoulli_log_likelihood,
    categorical_kl_uniform,
    gaussian_log_density,
    sample_concrete,
    sample_diag_gaussian,
    sample_gumbel,
)
from gmvae.harness import run_bench
from gmvae.model import GMVAE, GMVAEConfig
from gmvae.objectives import component_terms, elbo_concrete, elbo_marginal
from gmvae.tensor import Parameter, Tensor
from gmvae.training import KLSchedule, TrainConfig, evaluate, train

from conftest import bind, gradient_error, jitter_biases, record_criterion, tiny_config
from oracles import reference_marginal_loss
from test_tensor import OPS, _case

pytestmark = pytest.mark.slow

# -- shared clustering task (criteria 5 and 6) --------------------------------------

TASK = dict(K=3, n_per_cluster=200, d=16, separation=10.0, sigma=1.0)
TASK_MODEL = dict(z_dim=2, hidden_shared=64, hidden_y=[64, 32], hidden_z=[64, 32],
                  hidden_decoder=[32, 64], likelihood="gaussian")
TASK_TRAIN = dict(batch_size=16, patience=50, max_epochs=200)
ANNEALED = KLSchedule("ramp-linear", 100)
UNANNEALED = KLSchedule("constant", value=1.0)
SEEDS = range(5)


def clustering_run(seed: int, estimator: str, schedule: KLSchedule) -> dict:
    data = synth_gmm(TASK["K"], TASK["n_per_cluster"], TASK["d"], TASK["separation"], TASK["sigma"], seed)
    rest, test = split_tail(data, 0.2)
    tr, val = split_tail(rest, 0.1)
    model = GMVAE(GMVAEConfig(K=TASK["K"], x_dim=TASK["d"], **TASK_MODEL), seed=seed)
    train(model, tr, val, TrainConfig(estimator=estimator, seed=seed, schedule=schedule, **TASK_TRAIN))
    return evaluate(model, test, rng=RngStream(seed, (4,)))


# -- 1 -------------------------------------------------------------------------------

def _distribution_case(name, rng):
    b, k = int(rng.integers(1, 5)), int(rng.integers(2, 7))
    w = rng.uniform(0.5, 1.5, size=(b, k)) * rng.choice([-1.0, 1.0], size=(b, k))
    wb = rng.uniform(0.5, 1.5, size=b)
    if name == "sample_concrete":
        logits = Parameter("l", rng.normal(size=(b, k)))
        g, tau = rng.gumbel(size=(b, k)), float(rng.uniform(0.5, 2.0))
        return [logits], lambda tape: T.reduce_sum(
            sample_concrete(bind(tape, logits), tau, FixedNoise(gumbel=g)).value * w)
    if name == "sample_diag_gaussian":
        mu, lv = Parameter("mu", rng.normal(size=(b, k))), Parameter("lv", rng.normal(size=(b, k)))
        eps = rng.normal(size=(b, k))
        return [mu, lv], lambda tape: T.reduce_sum(sample_diag_gaussian(
            DiagGaussianParams(bind(tape, mu), bind(tape, lv)), FixedNoise(normal=eps)) * w)
    if name == "categorical_kl_uniform":
        logits = Parameter("l", rng.normal(size=(b, k)) * 2)
        return [logits], lambda tape: T.reduce_sum(
            categorical_kl_uniform(CategoricalParams(bind(tape, logits))) * wb)
    if name == "gaussian_log_density":
        z, mu, lv = (Parameter(n, rng.normal(size=(b, k))) for n in ("z", "mu", "lv"))
        return [z, mu, lv], lambda tape: T.reduce_sum(gaussian_log_density(
            bind(tape, z), DiagGaussianParams(bind(tape, mu), bind(tape, lv))) * wb)
    if name == "bernoulli_log_likelihood":
        x = (rng.random((b, k)) < 0.5).astype(float)
        logits = Parameter("l", rng.normal(size=(b, k)) * 3)
        return [logits], lambda tape: T.reduce_sum(bernoulli_log_likelihood(x, bind(tape, logits)) * wb)
    raise KeyError(name)


def _kink_margin(build):
    """Smallest |relu input| seen while evaluating ``build(None)``."""
    seen = [math.inf]
    original = T.relu

    def watched(x):
        seen[0] = min(seen[0], float(np.min(np.abs(T.tensor(x).data))))
        return original(x)

    T.relu = watched
    try:
        build(None)
    finally:
        T.relu = original
    return seen[0]


def _objective_case(name, rng):
    # redraw until no relu input is within 1e-3 of the kink, where central
    # differences straddle two slopes
    while True:
        params, build = _objective_draw(name, rng)
        if _kink_margin(build) > 1e-3:
            return params, build


def _objective_draw(name, rng):
    K, zd, xd, B = int(rng.integers(2, 5)), int(rng.integers(1, 4)), int(rng.integers(2, 7)), int(rng.integers(1, 5))
    lik = str(rng.choice(["bernoulli", "gaussian"]))
    model = jitter_biases(GMVAE(tiny_config(K=K, z_dim=zd, x_dim=xd, likelihood=lik),
                                seed=int(rng.integers(1 << 30))), seed=int(rng.integers(1 << 30)))
    x = (rng.random((B, xd)) < 0.5).astype(float)
    eps, g = rng.normal(size=(B, zd)), rng.gumbel(size=(B, K))
    w, tau = float(rng.uniform(0, 1)), float(rng.uniform(0.5, 2.0))
    params = list(model.parameters())
    if name == "elbo_marginal":
        return params, lambda tape: elbo_marginal(model, x, FixedNoise(normal=eps), w, tape)
    return params, lambda tape: elbo_concrete(model, x, FixedNoise(normal=eps, gumbel=g), tau, w, tape)


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    worst = {}
    groups = [(op, _case) for op in OPS]
    groups += [(n, _distribution_case) for n in ("sample_concrete", "sample_diag_gaussian",
                                                 "categorical_kl_uniform", "gaussian_log_density",
                                                 "bernoulli_log_likelihood")]
    groups += [(n, _objective_case) for n in ("elbo_marginal", "elbo_concrete")]
    for name, make in groups:
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        worst[name] = max(gradient_error(*reversed(make(name, rng))) for _ in range(20))
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-4 and elapsed < 60
    record_criterion("1 gradient suite", ok,
                     f"{len(groups)} ops x 20 instances, worst rel err {worst[top]:.2e} ({top}), {elapsed:.1f}s")
    assert ok


# -- 2 -------------------------------------------------------------------------------

def test_criterion_2_distribution_laws():
    start = time.perf_counter()
    logits = np.array([0.5, -1.0, 1.2, 0.0])
    g = sample_gumbel((100_000, 4), RngStream(3)).data
    counts = np.bincount(np.argmax(logits + g, axis=1), minlength=4)
    probs = np.exp(logits) / np.exp(logits).sum()
    p_chi = stats.chisquare(counts, probs * counts.sum()).pvalue

    rng = np.random.default_rng(0)
    simplex_ok = True
    for tau in np.logspace(-3, 1, 200):
        v = sample_concrete(Tensor(rng.normal(size=(50, 6)) * 10), float(tau), RngStream(int(tau * 1e6))).value.data
        simplex_ok &= bool(np.all(v > 0) and np.all(np.abs(v.sum(axis=1) - 1) < 1e-9))

    s = sample_concrete(Tensor(np.zeros((10_000, 10))), 0.01, RngStream(5)).value.data
    concentrated = float(np.mean(s.max(axis=1) > 0.99))

    z = sample_diag_gaussian(DiagGaussianParams(Tensor(np.zeros(100_000)), Tensor(np.zeros(100_000))),
                             RngStream(1)).data
    elapsed = time.perf_counter() - start
    parts = {"chi-square": p_chi > 0.001, "simplex": simplex_ok, "concentration": concentrated >= 0.99,
             "moments": abs(z.mean()) < 0.02 and abs(z.var() - 1) < 0.05, "runtime": elapsed < 60}
    ok = all(parts.values())
    failed = [k for k, v in parts.items() if not v]
    record_criterion("2 distribution laws", ok,
                     f"chi2 p={p_chi:.3f}, simplex {simplex_ok}, P(max>0.99)={concentrated:.4f} (need 0.99), "
                     f"mean {z.mean():+.4f} var {z.var():.4f}, {elapsed:.1f}s"
                     + (f"; failing: {', '.join(failed)}" if failed else ""))
    assert ok


# -- 3 -------------------------------------------------------------------------------

def test_criterion_3_estimator_equivalence():
    start = time.perf_counter()
    worst_marginal = worst_concrete = 0.0
    for seed in range(10):
        model = jitter_biases(GMVAE(tiny_config(), seed=seed), seed=seed)
        assert model.num_parameters() <= 500
        rng = np.random.default_rng(seed)
        x = (rng.random((6, 5)) < 0.5).astype(float)
        w = float(rng.uniform(0, 1))
        got = elbo_marginal(model, x, RngStream(seed), w).item()
        stream = RngStream(seed)
        eps = [stream.standard_normal((6, 2)) for _ in range(3)]
        worst_marginal = max(worst_marginal, abs(got - reference_marginal_loss(model.state_dict(), x, eps, 3, 2, w)))
        z_noise = rng.normal(size=(6, 2))
        for k in range(3):
            g = np.zeros((6, 3))
            g[:, k] = 30.0
            noise = FixedNoise(normal=z_noise, gumbel=g)
            relaxed = elbo_concrete(model, x, noise, 1e-3, 1.0).item()
            q, terms = component_terms(model, x, noise)
            path = -np.mean(terms.data[:, k] - categorical_kl_uniform(q).data)
            worst_concrete = max(worst_concrete, abs(relaxed - path))
    elapsed = time.perf_counter() - start
    ok = worst_marginal < 1e-10 and worst_concrete < 1e-3 and elapsed < 10
    record_criterion("3 estimator equivalence", ok,
                     f"marginal vs reference {worst_marginal:.1e} (<1e-10), concrete tau=1e-3 vs path "
                     f"{worst_concrete:.1e} (<1e-3), {elapsed:.1f}s")
    assert ok


# -- 4 -------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def bench():
    start = time.perf_counter()
    result = run_bench()
    return result, time.perf_counter() - start


def test_criterion_4_scaling(bench):
    result, elapsed = bench
    m = result.row("marginal", 40).median_ms / result.row("marginal", 10).median_ms
    c = result.row("concrete", 40).median_ms / result.row("concrete", 10).median_ms
    ok = m >= 2.5 and c <= 1.3 and elapsed < 600
    record_criterion("4 K-scaling", ok,
                     f"marginal K40/K10 = {m:.2f} (>=2.5), concrete K40/K10 = {c:.2f} (<=1.3), {elapsed:.0f}s")
    assert ok


def test_bench_examples(bench):
    result, _ = bench
    ks = [2, 5, 10, 20, 40]
    marginal = [result.row("marginal", k).median_ms for k in ks]
    ratio = result.row("marginal", 2).median_ms / result.row("concrete", 2).median_ms
    monotone = all(b >= a for a, b in zip(marginal, marginal[1:]))
    ok = monotone and 1 / 3 < ratio < 3
    record_criterion("4b bench examples", ok,
                     f"marginal medians {[round(v, 1) for v in marginal]} ms nondecreasing={monotone}, "
                     f"K=2 marginal/concrete = {ratio:.2f}")
    assert ok


# -- 5 -------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def annealed_runs():
    start = time.perf_counter()
    runs = {est: [clustering_run(s, est, ANNEALED) for s in SEEDS] for est in ("concrete", "marginal")}
    return runs, time.perf_counter() - start


def test_criterion_5_clustering_and_collapse(annealed_runs):
    runs, annealed_time = annealed_runs
    start = time.perf_counter()
    flat = [clustering_run(s, "concrete", UNANNEALED) for s in SEEDS]
    elapsed = annealed_time / 2 + time.perf_counter() - start
    pur_a = [float(r["purity"]) for r in runs["concrete"]]
    clustered = sum(p >= 0.9 for p in pur_a)
    collapsed = sum(r["kl_y"] < 0.05 and r["purity"] < 0.6 for r in flat)
    ok = clustered >= 3 and collapsed >= 3 and elapsed < 900
    record_criterion("5 clustering + collapse", ok,
                     f"annealed ({ANNEALED.kind}, T={ANNEALED.scale:g}) purity {[round(p, 2) for p in pur_a]} "
                     f"-> {clustered}/5 >= 0.9 (need 3); w=1 kl_y {[round(r['kl_y'], 3) for r in flat]} "
                     f"purity {[round(float(r['purity']), 2) for r in flat]} -> {collapsed}/5 collapsed (need 3); "
                     f"{elapsed:.0f}s")
    assert ok


# -- 6 -------------------------------------------------------------------------------

def test_criterion_6_quality_parity(annealed_runs):
    runs, elapsed = annealed_runs
    c = np.array([r["reconstruction_ll"] for r in runs["concrete"]])
    m = np.array([r["reconstruction_ll"] for r in runs["marginal"]])
    pooled = math.sqrt((c.var(ddof=1) + m.var(ddof=1)) / 2)
    gap = abs(c.mean() - m.mean())
    ok = gap < 2 * pooled and elapsed < 1800
    record_criterion("6 quality parity", ok,
                     f"held-out recon LL concrete {c.mean():.3f}+-{c.std(ddof=1):.3f}, marginal "
                     f"{m.mean():.3f}+-{m.std(ddof=1):.3f}; gap {gap:.3f} vs 2*pooled sd {2 * pooled:.3f}; "
                     f"{elapsed:.0f}s")
    assert ok


# -- 7 -------------------------------------------------------------------------------

def _mnist_paths():
    root = os.environ.get("GMVAE_MNIST_DIR")
    if not root:
        return None
    for name in ("train-images-idx3-ubyte", "train-images.idx3-ubyte"):
        if (Path(root) / name).is_file():
            return Path(root) / name
    return None


def test_criterion_7_mnist_smoke():
    path = _mnist_paths()
    if path is None:
        record_criterion("7 MNIST smoke", None, "no IDX files (set GMVAE_MNIST_DIR to run)")
        pytest.skip("MNIST IDX files not supplied")
    data = load_idx_images(path).subset(slice(0, 5000))
    data.features = binarize(data.features)
    tr, val = split_tail(data, 0.1)
    model = GMVAE(GMVAEConfig(K=10, x_dim=data.dim), seed=0)
    rep = train(model, tr, val, TrainConfig(max_epochs=5, patience=5))
    losses = [r.train_loss for r in rep.epochs]
    metrics = evaluate(model, val)
    ok = len(losses) == 5 and all(b < a for a, b in zip(losses, losses[1:])) and math.isfinite(metrics["reconstruction_ll"])
    record_criterion("7 MNIST smoke", ok, f"train loss by epoch {[round(v, 2) for v in losses]}, "
                     f"val recon LL {metrics['reconstruction_ll']:.2f}")
    assert ok


# -- 8 -------------------------------------------------------------------------------

def test_criterion_8_determinism(tmp_path):
    files = {}
    for estimator in ("concrete", "marginal"):
        cfg = {"data": {"source": "synthetic", "K": 3, "n_per_cluster": 30, "d": 6, "seed": 2},
               "model": {"K": 3, "z_dim": 2, "hidden_shared": 16, "hidden_y": [16, 8], "hidden_z": [16, 8],
                         "hidden_decoder": [8, 16], "likelihood": "gaussian"},
               "train": {"estimator": estimator, "max_epochs": 3, "batch_size": 16}}
        path = tmp_path / f"{estimator}.json"
        path.write_text(json.dumps(cfg))
        for run in ("a", "b"):
            out = tmp_path / estimator / run
            assert main(["train", "--config", str(path), "--out", str(out), "--seed", "7"]) == 0
            assert main(["eval", "--config", str(path), "--out", str(out), "--seed", "7"]) == 0
        for name in ("metrics.csv", "train_report.json", "checkpoint.bin", "eval_metrics.json"):
            a = (tmp_path / estimator / "a" / name).read_bytes()
            b = (tmp_path / estimator / "b" / name).read_bytes()
            files[f"{estimator}/{name}"] = a == b
    ok = all(files.values())
    differing = [k for k, v in files.items() if not v]
    record_criterion("8 determinism", ok, f"{sum(files.values())}/{len(files)} metric files bit-identical"
                     + (f"; differ: {differing}" if differing else ""))
    assert ok
