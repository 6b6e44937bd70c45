"""Clustering diagnostics computed from hard cluster assignments."""
from __future__ import annotations

import numpy as np

from .errors import ContractError


def purity(assignments, labels) -> float:
    """Fraction of points whose cluster's majority label equals their own."""
    a = np.asarray(assignments, dtype=np.int64).reshape(-1)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if a.size != y.size:
        raise ContractError(f"{a.size} assignments but {y.size} labels")
    if a.size == 0:
        raise ContractError("purity of an empty assignment is undefined")
    total = 0
    for c in np.unique(a):
        total += np.bincount(y[a == c]).max()
    return total / a.size


def usage_entropy(assignments, K: int) -> float:
    """Entropy in nats of the empirical histogram of cluster assignments."""
    counts = np.bincount(np.asarray(assignments, dtype=np.int64), minlength=K)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum()) + 0.0  # no -0.0 for a single cluster
