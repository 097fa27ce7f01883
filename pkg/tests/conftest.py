"""Shared test helpers: finite-difference oracles and synthetic fixtures."""

import numpy as np
import pytest

from crystalloss.data import FeatureDataset, FeatureRecord


def central_diff(f, x, eps=1e-6):
    """Central finite differences of a scalar function of a vector."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += eps
        xm[i] -= eps
        grad[i] = (f(xp) - f(xm)) / (2 * eps)
    return grad


def rel_err(a, b, floor=1e-3):
    """Elementwise relative error with an absolute regime below `floor`."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / denom


def dataset_from_rows(rows):
    """rows: (subject, template, media, score, feature) tuples."""
    return FeatureDataset([FeatureRecord(*row) for row in rows])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
