"""Synthetic instances for tests, benchmarks and the command line.

All generators return ``(A, b)`` and draw from ``numpy.random.default_rng(seed)``.
"""
from __future__ import annotations

import numpy as np

from .errors import ContractViolation


def gaussian(n: int, d: int, seed: int = 0, noise: float = 1.0):
    """i.i.d. standard normal rows with labels from a planted model plus noise."""
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, d))
    x_true = rng.standard_normal(d)
    return A, A @ x_true + noise * rng.standard_normal(n)


def lstsq(n: int, d: int, seed: int = 0, noise: float = 0.5):
    """Well-conditioned least squares with a planted solution."""
    return gaussian(n, d, seed, noise)


def example1(n: int, d: int, seed: int = 0):
    """Row 0 is the only nonzero row; every other label is zero too."""
    rng = np.random.default_rng(seed)
    A = np.zeros((n, d))
    b = np.zeros(n)
    A[0] = rng.standard_normal(d)
    b[0] = rng.standard_normal()
    return A, b


def example2(n: int, d: int, seed: int = 0):
    """Unit-scale rows plus one row (index 0) whose gradient is about n times larger."""
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, d)) / np.sqrt(d)
    b = rng.standard_normal(n)
    A[0] *= np.sqrt(n)
    b[0] *= np.sqrt(n)
    return A, b


def example3(n: int, d: int, nu: float = 1 / 16, seed: int = 0):
    """A nu fraction of rows (the first ones) with gradient norms of order n.

    Heavy rows have norm sqrt(n) and the rest norm sqrt(d), so that at x = 0,
    with labels of matching scale, the heavy gradients are of order n and the
    light ones of order d.
    """
    if not 0 < nu <= 1:
        raise ContractViolation("nu must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    U = rng.standard_normal((n, d))
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    heavy = int(round(nu * n))
    scale = np.full(n, np.sqrt(d))
    scale[:heavy] = np.sqrt(n)
    A = U * scale[:, None]
    x_true = rng.standard_normal(d) / np.sqrt(d)
    return A, A @ x_true + rng.standard_normal(n)


GENERATORS = {
    "gaussian": gaussian,
    "lstsq": lstsq,
    "example1": example1,
    "example2": example2,
    "example3": example3,
}
