"""Constant-factor estimation of the total gradient mass by guess-and-verify.

For geometric guesses ``guess = 2^k``, taken from the top down, the level-set
aggregation of the sampler is evaluated over already-frozen sketches; the
first guess whose aggregate lands in ``[guess/2, 2 guess]`` is accepted.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EstimationFailure
from ._backend import verify_guesses
from .levels import PAD, depth_table, growth_table


@dataclass(frozen=True)
class MassEstimate:
    value: float
    eps: float
    guess_used: float
    per_class: dict = field(default_factory=dict)


def verify_inputs(norms, depth_of_row, group, shift_row, alpha, n, level_count, slack: int = 2, c_depth: float = 1.0):
    """(group labels, argument tuple for the ``verify_guesses`` kernel)."""
    norms = np.ascontiguousarray(norms, dtype=float)
    depth_of_row = np.ascontiguousarray(depth_of_row, dtype=np.int64)
    group = np.asarray(group, dtype=np.int64)
    order = np.argsort(group, kind="stable")
    sorted_group = group[order]
    first = np.flatnonzero(np.r_[True, sorted_group[1:] != sorted_group[:-1]]) if len(group) else np.zeros(0, np.int64)
    labels = sorted_group[first]
    n_groups = len(labels)
    starts = np.append(first, len(group)).astype(np.int64)
    shift = np.ascontiguousarray(np.asarray(shift_row, dtype=float)[order[first]])
    sorted_norms = norms[order]
    top = np.add.reduceat(sorted_norms, first) if n_groups else np.zeros(0)
    low = np.minimum.reduceat(np.where(sorted_norms > 0, sorted_norms, np.inf), first) if n_groups else np.zeros(0)
    live = top > 0
    k_hi = np.where(live, np.ceil(np.log2(np.where(live, top, 1.0))), 0).astype(np.int64)
    k_lo = np.where(live, np.floor(np.log2(np.where(live, low, 1.0))) - slack, 1).astype(np.int64)
    args = (
        norms, depth_of_row, order.astype(np.int64), starts, shift, k_hi, k_lo, float(alpha),
        depth_table(float(alpha), int(n), int(level_count), float(c_depth)), growth_table(float(alpha), int(level_count)), PAD, int(level_count),
    )
    return labels, args


def guess_and_verify(norms, depth_of_row, group, shift_row, alpha, n, level_count, slack: int = 2, c_depth: float = 1.0):
    """Accepted guess and aggregate for every group that has reports.

    ``group`` labels each report and ``shift_row`` gives the boundary offset
    of its group.  Returns (labels, guess, aggregate, level of each report,
    masses of shape (labels, level_count), status) where status is 1 for an accepted
    guess, 0 for a group whose reports all vanish and -1 when no guess
    verified.  Guesses run from the power of two just above the summed
    reported norms down to ``2^-slack`` times the smallest one; the first
    accepted wins.
    """
    labels, args = verify_inputs(norms, depth_of_row, group, shift_row, alpha, n, level_count, slack, c_depth)
    guess, agg, lev, masses, status = verify_guesses(*args)
    return labels, guess, agg, lev, masses, status


def estimate_mass(sampler, x, eps: float, measure=None, instance: int = 0) -> MassEstimate:
    """Total gradient mass at x from a frozen sampler's per-class sketches."""
    plan = sampler.plan(x, measure)
    view = plan.instance_view(instance)
    if view.failed:
        raise EstimationFailure("no self-consistent guess for at least one norm class")
    per_class = {int(c): (float(f), float(m)) for c, f, m in zip(view.classes, view.mass_est, view.guess)}
    total = float(view.mass_est.sum())
    guess = float(view.guess.sum())
    if total == 0.0:
        guess = 0.0
    return MassEstimate(total, eps, guess, per_class)


def geometric_guesses(lo: float, hi: float) -> list[float]:
    """Powers of two covering [lo, hi], largest first."""
    if lo <= 0 or hi < lo:
        return []
    return [2.0**k for k in range(math.ceil(math.log2(hi)), math.floor(math.log2(lo)) - 1, -1)]
