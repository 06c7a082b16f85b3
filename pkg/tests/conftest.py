import numpy as np
import pytest

from dsdkit import pipeline

FD_STEP = 1e-5
FD_TOL = 1e-4


def numeric_grad(f, x, h=FD_STEP):
    """Central finite differences of scalar ``f`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def rel_err(analytic, numeric):
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-10)
    return float(np.linalg.norm(a - n) / scale)


def separable_set(n, dim=32, seed=0, gap=5.0):
    """Three Gaussian blobs (bonafide, tts, vc) on distinct axes, unit spread."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, n)
    means = np.zeros((3, dim))
    for k in range(3):
        means[k, k] = gap
    return pipeline.from_arrays(means[labels] + rng.normal(size=(n, dim)), labels)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
