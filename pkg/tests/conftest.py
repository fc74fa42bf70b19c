"""Shared helpers for the test suite."""

import numpy as np
import pytest

from kfacopt.network import BatchCache
from kfacopt.stats import CovState, init_cov, update_cov


def rel_err(actual, reference) -> float:
    """Norm-based relative error against a reference value."""
    a = np.asarray(actual, dtype=np.float64).ravel()
    r = np.asarray(reference, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(r), 1e-300)
    return float(np.linalg.norm(a - r) / denom)


def grad_err(actual, reference) -> float:
    """Entrywise error scaled by the larger of 1 and the gradient magnitude."""
    a = np.asarray(actual, dtype=np.float64).ravel()
    r = np.asarray(reference, dtype=np.float64).ravel()
    scale = max(1.0, float(np.max(np.abs(r), initial=0.0)),
                float(np.max(np.abs(a), initial=0.0)))
    return float(np.max(np.abs(a - r), initial=0.0) / scale)


def random_spd(rng: np.random.Generator, n: int, jitter: float = 0.1) -> np.ndarray:
    m = rng.standard_normal((n, n))
    return m @ m.T / n + jitter * np.eye(n)


def fake_cache(layer_dims, batch_size, rng: np.random.Generator) -> BatchCache:
    """Cache with random activations/derivatives shaped like a real forward pass."""
    L = len(layer_dims) - 1
    inputs = [np.vstack([rng.standard_normal((layer_dims[i], batch_size)),
                         np.ones((1, batch_size))]) for i in range(L)]
    g = [rng.standard_normal((layer_dims[i + 1], batch_size)) for i in range(L)]
    return BatchCache(inputs=inputs, pre_acts=[], acts=[], bn=[None] * L,
                      training=True, batch_size=batch_size, g=g)


def synthetic_cov(layer_dims, mode, rng: np.random.Generator, sweeps: int = 3,
                  batch_size: int = 16) -> CovState:
    """Covariance state fed from random caches; cross pairs stay consistent."""
    cov = init_cov(layer_dims, mode)
    for _ in range(sweeps):
        update_cov(cov, fake_cache(layer_dims, batch_size, rng))
    return cov


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
