"""Check both training objectives against central differences on a tiny model.

    python3 demos/01_gradients.py
"""
import numpy as np

from gmvae import tensor as T
from gmvae.distributions import FixedNoise
from gmvae.model import GMVAE, GMVAEConfig
from gmvae.objectives import elbo_concrete, elbo_marginal

cfg = GMVAEConfig(K=3, x_dim=5, z_dim=2, hidden_shared=4, hidden_y=[4, 3], hidden_z=[4, 3],
                  hidden_decoder=[3, 4], likelihood="bernoulli")
model = GMVAE(cfg, seed=0)
print(f"model has {model.num_parameters()} parameters")

# Small nonzero biases keep every relu away from its kink, where a
# finite difference straddles two slopes.
rng = np.random.default_rng(1)
for name, p in model.params.items():
    if name.endswith("bias"):
        p.value[:] = rng.uniform(-0.1, 0.1, p.value.shape)

x = (rng.random((4, 5)) < 0.5).astype(float)
# Pinning the noise makes each loss a deterministic function of the weights.
noise = FixedNoise(normal=rng.normal(size=(4, 2)), gumbel=rng.gumbel(size=(4, 3)))
params = list(model.parameters())

for label, loss in [("marginal", lambda tape: elbo_marginal(model, x, noise, 0.7, tape)),
                    ("concrete", lambda tape: elbo_concrete(model, x, noise, 0.5, 0.7, tape))]:
    model.zero_grad()
    T.backward(loss(T.Tape()), params)
    analytic = [p.grad.copy() for p in params]
    numeric = T.finite_diff_gradient(lambda: loss(None).item(), params, 1e-5)
    err = max(T.relative_error(a, n) for a, n in zip(analytic, numeric))
    print(f"{label:9s} loss {loss(None).item():.6f}  max relative gradient error {err:.2e}")
