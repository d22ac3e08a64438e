"""Brute-force reference values for desk-scale instances.

Everything here is exact dense arithmetic over the full matrix and serves as
ground truth for tests and benchmarks.  "Gradient" means the data term
``g(r_i) a_i`` of each summand: regularizers add the same vector to every
summand, so they shift no probability and add no variance.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ContractViolation, UndefinedDistribution
from .levels import level_index, level_lower, n_levels
from .measures import Kind, MeasureSpec, loss, phi, regularizer_gradient, regularizer_value, sampling_gradients

MAX_ROWS = 10_000
MAX_DIM = 64


@dataclass
class ExactInstance:
    A: np.ndarray
    b: np.ndarray
    measure: MeasureSpec = field(default_factory=lambda: MeasureSpec(Kind.L2))
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.b = np.asarray(self.b, dtype=float).ravel()
        n, d = self.A.shape
        if n > MAX_ROWS or d > MAX_DIM:
            raise ContractViolation(f"oracle is limited to n <= {MAX_ROWS}, d <= {MAX_DIM}")
        if len(self.b) != n:
            raise ContractViolation("label count differs from row count")
        self.measure.check_dim(d)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    def gradients(self, x) -> np.ndarray:
        key = np.asarray(x, dtype=float).tobytes()
        if key not in self._cache:
            self._cache.clear()
            self._cache[key] = sampling_gradients(self.measure, self.A, self.b, x)
        return self._cache[key]

    def norms(self, x) -> np.ndarray:
        return np.linalg.norm(self.gradients(x), axis=1)

    def mass(self, x) -> float:
        return float(self.norms(x).sum())

    def mean_gradient(self, x) -> np.ndarray:
        """Gradient of the averaged objective, regularizer included."""
        return self.gradients(x).mean(axis=0) + regularizer_gradient(self.measure, x)

    def objective(self, x) -> float:
        """Average of the summands, F(x) = (1/n) sum f_i(x)."""
        r = self.A @ np.asarray(x, dtype=float) - self.b
        return float(np.mean(phi(self.measure, r))) + regularizer_value(self.measure, x)

    def hessians(self, x, order: int = 2) -> np.ndarray:
        """Per-row ``w(r) a a^T`` with ``w(r) = r^(order-2)``, shape (n, d, d)."""
        outer = self.A[:, :, None] * self.A[:, None, :]
        if order == 2:
            return outer
        if order == 3:
            r = self.A @ np.asarray(x, dtype=float) - self.b
            return r[:, None, None] * outer
        raise ContractViolation("order must be 2 or 3")


class Variances(NamedTuple):
    sigma2_opt: float
    sigma2_uni: float


def _as_instance(instance, b=None, measure=None) -> ExactInstance:
    if isinstance(instance, ExactInstance):
        return instance
    return ExactInstance(instance, b, measure or MeasureSpec(Kind.L2))


def exact_importance_distribution(instance: ExactInstance, x) -> np.ndarray:
    norms = instance.norms(x)
    total = norms.sum()
    if not total > 0:
        raise UndefinedDistribution("all gradients vanish at x")
    return norms / total


def exact_variances(instance: ExactInstance, x) -> Variances:
    """Variance of one-sample gradient estimates under importance and uniform sampling.

    With v = grad_i / (n p_i): importance sampling gives
    ((sum |grad_i|)^2 - n^2 |mean grad|^2) / n^2 and uniform sampling gives
    (n sum |grad_i|^2 - n^2 |mean grad|^2) / n^2.
    """
    G = instance.gradients(x)
    n = instance.n
    norms = np.linalg.norm(G, axis=1)
    mean_sq = float(np.sum(G.mean(axis=0) ** 2)) * n * n
    opt = _difference(float(norms.sum()) ** 2, mean_sq) / n**2
    uni = _difference(n * float(np.sum(norms**2)), mean_sq) / n**2
    return Variances(opt, uni)


def _difference(a: float, b: float) -> float:
    # a >= b in exact arithmetic; gaps at rounding level are reported as zero
    gap = a - b
    return 0.0 if gap <= 64 * np.finfo(float).eps * abs(a) else gap


def exact_second_moments(instance: ExactInstance, x) -> Variances:
    """E|v|^2 under importance and uniform sampling (no mean subtracted)."""
    norms = instance.norms(x)
    n = instance.n
    return Variances(float(norms.sum()) ** 2 / n**2, float(np.sum(norms**2)) / n)


class LevelSets(NamedTuple):
    level: np.ndarray
    masses: np.ndarray
    counts: np.ndarray
    lower_masses: np.ndarray


def exact_level_sets(instance: ExactInstance, x, shift: float, alpha: float, guess: float, level_count: int | None = None) -> LevelSets:
    """Exact level of every row under the sampler's boundaries.

    ``masses`` sums true norms per level; ``lower_masses`` counts each member
    at its level's lower boundary, which is what the sampler aggregates.
    """
    level_count = level_count or n_levels(instance.n, alpha, 2.0)
    norms = instance.norms(x)
    lev = level_index(norms, shift, alpha, guess, level_count)
    inside = lev >= 0
    masses = np.bincount(lev[inside], weights=norms[inside], minlength=level_count).astype(float)
    counts = np.bincount(lev[inside], minlength=level_count)
    lower = level_lower(np.arange(level_count), shift, alpha, guess) * counts
    return LevelSets(lev, masses, counts, lower)


def frobenius_distribution(instance: ExactInstance, x, order: int = 2) -> np.ndarray:
    H = instance.hessians(x, order)
    norms = np.sqrt(np.einsum("nij,nij->n", H, H))
    total = norms.sum()
    if not total > 0:
        raise UndefinedDistribution("all Hessians vanish at x")
    return norms / total


def least_squares_optimum(A, b) -> np.ndarray:
    """Minimizer of sum (<a_i, x> - b_i)^2 via the normal equations (lstsq for safety)."""
    return np.linalg.lstsq(np.asarray(A, float), np.asarray(b, float), rcond=None)[0]


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def row_loss(instance: ExactInstance, i: int, x) -> float:
    return loss(instance.measure, instance.A[i], instance.b[i], x)
