"""Measure functions, their (sub)gradients and smoothness constants.

Every shipped loss has the form ``f_i(x) = phi(<a_i, x> - b_i) + reg(x)``, so its
gradient splits into a data term ``g(r) * a_i`` and a regularizer term that is
the same for every row.  Sketches only ever sample the data term.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ContractViolation


class Kind(str, Enum):
    L1 = "l1"
    L2 = "l2"
    HUBER = "huber"
    RIDGE = "ridge"
    LASSO = "lasso"
    GROUP_LASSO = "group_lasso"


_SQUARED_DATA = (Kind.L2, Kind.RIDGE, Kind.LASSO, Kind.GROUP_LASSO)


@dataclass(frozen=True)
class MeasureSpec:
    kind: Kind = Kind.L2
    tau: float = 1.0
    lam: float = 0.0
    groups: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.kind is Kind.HUBER and not self.tau > 0:
            raise ContractViolation("Huber threshold tau must be positive")
        if not self.lam >= 0:
            raise ContractViolation("regularization weight must be nonnegative")
        if self.kind is Kind.GROUP_LASSO:
            if not self.groups:
                raise ContractViolation("group lasso needs a partition of the coordinates")
            object.__setattr__(self, "groups", tuple(tuple(int(i) for i in g) for g in self.groups))

    def check_dim(self, d: int) -> None:
        if self.kind is Kind.GROUP_LASSO:
            flat = sorted(i for g in self.groups for i in g)
            if flat != list(range(d)):
                raise ContractViolation(f"groups do not partition range({d})")

    def alpha_of(self, eps: float) -> float:
        return smoothness_alpha(self, eps)

    @property
    def squared_data(self) -> bool:
        return self.kind in _SQUARED_DATA


def residuals(A: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.asarray(A) @ np.asarray(x) - np.asarray(b)


def phi(spec: MeasureSpec, r):
    """Scalar data loss as a function of the residual."""
    r = np.asarray(r, dtype=float)
    if spec.squared_data:
        return r * r
    if spec.kind is Kind.L1:
        return np.abs(r)
    inside = np.abs(r) <= spec.tau
    return np.where(inside, r * r / (2 * spec.tau), np.abs(r) - spec.tau / 2)


def g(spec: MeasureSpec, r):
    """Derivative of ``phi`` with the zero subgradient at kinks."""
    r = np.asarray(r, dtype=float)
    if spec.squared_data:
        return 2.0 * r
    if spec.kind is Kind.L1:
        return np.sign(r)
    return np.where(np.abs(r) <= spec.tau, r / spec.tau, np.sign(r))


def _check(a, x):
    a = np.asarray(a, dtype=float)
    x = np.asarray(x, dtype=float)
    if a.shape[-1] != x.shape[-1]:
        raise ContractViolation(f"row has {a.shape[-1]} features but x has {x.shape[-1]}")
    return a, x


def regularizer_value(spec: MeasureSpec, x) -> float:
    x = np.asarray(x, dtype=float)
    if spec.kind is Kind.RIDGE:
        return spec.lam * float(x @ x)
    if spec.kind is Kind.LASSO:
        return 2 * spec.lam * float(np.abs(x).sum())
    if spec.kind is Kind.GROUP_LASSO:
        spec.check_dim(len(x))
        return spec.lam * sum(np.sqrt(len(grp)) * np.linalg.norm(x[list(grp)]) for grp in spec.groups)
    return 0.0


def regularizer_gradient(spec: MeasureSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if spec.kind is Kind.RIDGE:
        return 2 * spec.lam * x
    if spec.kind is Kind.LASSO:
        return 2 * spec.lam * np.sign(x)
    out = np.zeros_like(x)
    if spec.kind is Kind.GROUP_LASSO:
        spec.check_dim(len(x))
        for grp in spec.groups:
            idx = list(grp)
            norm = np.linalg.norm(x[idx])
            if norm > 0:
                out[idx] = spec.lam * np.sqrt(len(idx)) * x[idx] / norm
    return out


def loss(spec: MeasureSpec, a, b: float, x) -> float:
    a, x = _check(a, x)
    return float(phi(spec, a @ x - b)) + regularizer_value(spec, x)


def sampling_gradient(spec: MeasureSpec, a, b: float, x) -> np.ndarray:
    """Data term ``g(r) * a`` only."""
    a, x = _check(a, x)
    return g(spec, a @ x - b) * a


def gradient(spec: MeasureSpec, a, b: float, x) -> np.ndarray:
    """Full (sub)gradient of one summand, regularizer included."""
    return sampling_gradient(spec, a, b, x) + regularizer_gradient(spec, x)


def sampling_gradients(spec: MeasureSpec, A, b, x) -> np.ndarray:
    """Row-wise data terms for a whole matrix, shape (n, d)."""
    A, x = _check(A, x)
    return g(spec, A @ x - np.asarray(b, dtype=float))[:, None] * A


def smoothness_alpha(spec: MeasureSpec, eps: float) -> float:
    """Sketch accuracy that keeps gradient norms within (1 +/- eps)."""
    if not 0 < eps < 1:
        raise ContractViolation(f"eps must lie in (0, 1), got {eps}")
    return eps / 4


def gradient_norm_from_estimates(spec: MeasureSpec, v_norm, a_hat, r_hat) -> np.ndarray:
    """Norms of ``gradient_from_estimates`` given only an estimate of ``|r a|``."""
    v_norm = np.asarray(v_norm, dtype=float)
    if spec.squared_data:
        return 2.0 * v_norm
    flat = np.linalg.norm(np.asarray(a_hat, dtype=float), axis=-1)
    if spec.kind is Kind.L1:
        return flat
    inside = np.abs(np.asarray(r_hat, dtype=float)) <= spec.tau
    return np.where(inside, v_norm / spec.tau, flat)


def gradient_from_estimates(spec: MeasureSpec, v, a_hat, r_hat) -> np.ndarray:
    """Data-term gradients rebuilt from sketch estimates.

    ``v`` estimates ``r * a`` row-wise, ``a_hat`` estimates ``a`` and ``r_hat``
    the residual.  Linear pieces of ``g`` use ``v`` directly so they stay
    unbiased; constant pieces use ``sgn(r_hat) * a_hat``.
    """
    v = np.asarray(v, dtype=float)
    a_hat = np.asarray(a_hat, dtype=float)
    r_hat = np.asarray(r_hat, dtype=float)
    if spec.squared_data:
        return 2.0 * v
    flat = np.sign(r_hat)[..., None] * a_hat
    if spec.kind is Kind.L1:
        return flat
    inside = (np.abs(r_hat) <= spec.tau)[..., None]
    return np.where(inside, v / spec.tau, flat)
