"""Level-set geometry shared by the sampler, the estimator and the oracle.

All boundary arithmetic lives here so that exact and sketched code paths
classify a given norm identically.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np


def log2n(n: int) -> float:
    return max(1.0, math.log2(max(n, 2)))


def n_levels(n: int, alpha: float, c_k: float = 1.0) -> int:
    return int(math.ceil(c_k * log2n(n) / alpha))


def n_substreams(n: int, c_l: float = 2.0) -> int:
    return max(1, int(math.ceil(c_l * log2n(n))))


def level_top(shift, guess):
    return 8.0 * np.asarray(shift, dtype=float) * np.asarray(guess, dtype=float)


def level_upper(j, shift, alpha: float, guess):
    """Upper (open) end of level j: 8 shift guess / (1+alpha)^j."""
    return level_top(shift, guess) / np.power(1.0 + alpha, np.asarray(j, dtype=float))


def level_lower(j, shift, alpha: float, guess):
    return level_upper(np.asarray(j) + 1, shift, alpha, guess)


PAD = 3


@lru_cache(maxsize=64)
def growth_table(alpha: float, level_count: int) -> np.ndarray:
    """(1+alpha)^j for j = -PAD .. level_count + PAD, equal to ``level_upper``'s divisor bit for bit."""
    return np.power(1.0 + alpha, np.arange(-PAD, level_count + PAD + 1, dtype=float))


def level_index(norms, shift, alpha: float, guess, level_count: int) -> np.ndarray:
    """Level of each norm, or -1 when it falls outside levels 0..n_levels-1."""
    norms = np.asarray(norms, dtype=float)
    top = level_top(shift, guess) * np.ones_like(norms)
    j = np.full(norms.shape, -1, dtype=np.int64)
    pos = (norms > 0) & (top > 0)
    v, t = norms[pos], top[pos]
    with np.errstate(divide="ignore"):
        guess = np.floor(np.log(t / v) / math.log1p(alpha))
    jj = np.clip(guess, -1, level_count).astype(np.int64)
    grow = growth_table(float(alpha), int(level_count))
    # the log estimate is off by at most one level; -1 and level_count stand for "outside"
    for _ in range(3):
        jj = np.where(v >= t / grow[jj + PAD], jj - 1, jj)
        jj = np.where(v < t / grow[jj + 1 + PAD], jj + 1, jj)
        jj = np.clip(jj, -1, level_count)
    j[pos] = np.where(jj >= level_count, -1, jj)
    return j


def depth(j, alpha: float, n: int, c_depth: float = 1.0) -> np.ndarray:
    """Substream used for level j: max(1, floor(log2(alpha^2 (1+alpha)^j / (c_depth log2 n))))."""
    j = np.asarray(j, dtype=float)
    raw = np.floor(np.log2(alpha**2) + j * math.log2(1.0 + alpha) - math.log2(c_depth * log2n(n)))
    return np.maximum(1, raw).astype(np.int64)


@lru_cache(maxsize=64)
def depth_table(alpha: float, n: int, level_count: int, c_depth: float = 1.0) -> np.ndarray:
    return depth(np.arange(level_count), alpha, n, c_depth)


def dummy_cutoff(alpha: float, n: int) -> float:
    """Levels strictly above log_{1+alpha}(log2(n)^2 / alpha^3) receive dummies."""
    return math.log(log2n(n) ** 2 / alpha**3) / math.log1p(alpha)


@dataclass(frozen=True)
class DummySpec:
    """Virtual dummy rows per level: a count and a per-dummy mass factor.

    A dummy at level j carries mass ``c_w * guess / ((1+alpha)^j alpha^2)``;
    ``c_w`` is calibrated so the total over all levels is at most ``guess / 2``.
    """

    alpha: float
    n: int
    n_levels: int
    c_d: float = 1.0
    counts: np.ndarray = field(init=False, repr=False, compare=False)
    unit: np.ndarray = field(init=False, repr=False, compare=False)
    c_w: float = field(init=False)

    def __post_init__(self):
        j = np.arange(self.n_levels)
        grow = np.power(1.0 + self.alpha, j.astype(float))
        active = j > dummy_cutoff(self.alpha, self.n)
        counts = np.where(active, np.ceil(self.c_d * grow * self.alpha**3 / log2n(self.n)), 0.0)
        unit = 1.0 / (grow * self.alpha**2)
        per_mhat = float((counts * unit).sum())
        c_w = 0.5 * (1.0 - 1e-12) / per_mhat if per_mhat > 0 else 0.0
        object.__setattr__(self, "counts", counts.astype(np.int64))
        object.__setattr__(self, "unit", unit)
        object.__setattr__(self, "c_w", c_w)

    def weight(self, guess) -> np.ndarray:
        """Per-dummy mass at every level, shape (..., level_count)."""
        return self.c_w * np.asarray(guess, dtype=float)[..., None] * self.unit

    def level_mass(self, guess) -> np.ndarray:
        return self.counts * self.weight(guess)

    def total(self, guess) -> np.ndarray:
        return self.level_mass(guess).sum(axis=-1)


def level_cells(norms, depth_of_row, group, shift_g, guess_g, alpha, depth_tab, level_count):
    """Sparse form of ``level_masses``: (level per report, occupied cells ``group*level_count + j``, their masses)."""
    lev = level_index(norms, shift_g[group], alpha, guess_g[group], level_count)
    lev = np.where((lev >= 0) & (depth_tab[np.maximum(lev, 0)] == depth_of_row), lev, -1)
    counted = lev >= 0
    cells, counts = np.unique(group[counted] * level_count + lev[counted], return_counts=True)
    g, j = cells // level_count, cells % level_count
    L = depth_tab[j]
    scale = np.where(L > 1, np.power(2.0, L - 1), 1.0)
    significant = (L == 1) | (counts > 1.0 / alpha**2)
    lower = level_lower(j, shift_g[g], alpha, guess_g[g])
    return lev, cells, np.where(significant, lower * counts * scale, 0.0)


def level_masses(norms, depth_of_row, group, n_groups, shift_g, guess_g, alpha, n, level_count, c_depth=1.0):
    """Level-set mass estimates for many (instance, class) groups at once.

    ``norms`` are estimated gradient norms of reported rows, ``depth_of_row``
    the substream each report came from and ``group`` its group index.  A
    report counts toward level j only if it came from substream L_j.  Masses
    are lower-boundary counts, rescaled by the inverse inclusion probability
    ``2^(L_j - 1)`` when ``L_j > 1`` and more than ``1/alpha^2`` reports
    landed, and zero otherwise.

    Returns (level of each report or -1, masses of shape (n_groups, level_count)).
    """
    table = depth_table(float(alpha), int(n), int(level_count), float(c_depth))
    depth_of_row = np.asarray(depth_of_row, dtype=np.int64)
    group = np.asarray(group, dtype=np.int64)
    lev, cells, mass = level_cells(norms, depth_of_row, group, shift_g, guess_g, alpha, table, level_count)
    masses = np.zeros(n_groups * level_count)
    masses[cells] = mass
    return lev, masses.reshape(n_groups, level_count)


@lru_cache(maxsize=64)
def dummy_spec(alpha: float, n: int, level_count: int, c_d: float = 1.0) -> DummySpec:
    """Shared ``DummySpec``; it is immutable and every bank of one shape needs the same one."""
    return DummySpec(alpha, n, level_count, c_d)
