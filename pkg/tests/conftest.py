from __future__ import annotations

import numpy as np
import pytest


def central_diff(f, x, h=1e-6):
    """Central finite-difference gradient (or Jacobian) of ``f`` at ``x``."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x), dtype=float)
    J = np.zeros(f0.shape + x.shape)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        J[(...,) + idx] = (np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h)
    return J


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))


class ConstantResidual:
    """Residual model returning the same rate everywhere."""

    def __init__(self, g, delta_v=0.1):
        self.g = np.asarray(g, dtype=float)
        self.delta_v = delta_v

    def mean(self, v):
        v = np.asarray(v, dtype=float)
        return np.broadcast_to(self.g, v.shape).copy()

    def mean_and_gradient(self, v):
        return self.mean(v), np.zeros(np.shape(v))


class QuadraticResidual:
    """Smooth axis-wise residual ``g_j = a_j v_j + b_j v_j^2`` for gradient tests."""

    def __init__(self, a=(-0.4, 0.3, -0.2), b=(0.1, -0.2, 0.05), delta_v=0.1):
        self.a = np.asarray(a, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.delta_v = delta_v

    def mean(self, v):
        v = np.asarray(v, dtype=float)
        return self.a * v + self.b * v * v

    def mean_and_gradient(self, v):
        v = np.asarray(v, dtype=float)
        return self.mean(v), self.a + 2 * self.b * v


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def spread_inducing(rng, m, length_scale, lo=-2.0, hi=2.0, max_cond=1e6):
    """Sorted random inducing inputs whose SE Gram matrix is well conditioned.

    Finite differences of the ELBO carry round-off of order eps * cond(K_mm),
    so near-coincident points make a correct gradient look wrong.
    """
    while True:
        z = np.sort(rng.uniform(lo, hi, m))
        K = np.exp(-0.5 * (z[:, None] - z[None]) ** 2 / length_scale**2)
        if np.linalg.cond(K) <= max_cond:
            return z
