"""Per-step cost of the two estimators as the number of clusters grows.

Summing over every cluster runs the z-path K times per step; the relaxed
estimator runs it once. A reduced benchmark shows the difference:

    python3 demos/03_cost.py
"""
from gmvae.harness import run_bench

result = run_bench({"K_values": [2, 10, 40], "x_dim": 32, "steps": 30, "warmup": 3,
                    "model": {"hidden_shared": 128, "hidden_y": [128, 64], "hidden_z": [128, 64],
                              "hidden_decoder": [64, 128]}})
print(result.to_csv())
for est in ("marginal", "concrete"):
    ratio = result.row(est, 40).median_ms / result.row(est, 10).median_ms
    print(f"{est:9s} median step time K=40 / K=10: {ratio:.2f}")
