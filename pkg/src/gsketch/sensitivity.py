"""Online detection of rows whose gradient share can be large at some x.

Rows are treated in augmented form ``[a, -b]`` so that ``<[a, -b], [x, 1]>``
is the residual, and grouped into norm classes of the augmented row.  Within
a class the L1 sensitivity of row i is

    max_y |<a_i, y>| / sum_j |<a_j, y>|,

which bounds its share of gradient mass up to the factor two of the class
width.  The streaming tracker keeps rows whose prefix bound reaches the
threshold.  Prefix bounds only shrink as rows arrive, so a row dropped once
never needs to come back.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .gsampler import NO_CLASS, norm_class


def augment(A, b) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return np.concatenate([A, -np.asarray(b, dtype=float).reshape(-1, 1)], axis=1)


def l1_sensitivity(rows: np.ndarray, i: int) -> float:
    """max_y |<rows[i], y>| subject to sum_j |<rows[j], y>| <= 1, by linear programming."""
    rows = np.asarray(rows, dtype=float)
    m, k = rows.shape
    if not np.any(rows[i]):
        return 0.0
    if m == 1:
        return 1.0
    # variables [y (k, free), u (m, >= 0)]; |<rows_j, y>| <= u_j, sum u <= 1
    c = np.concatenate([-rows[i], np.zeros(m)])
    eye = np.eye(m)
    A_ub = np.block([[rows, -eye], [-rows, -eye], [np.zeros((1, k)), np.ones((1, m))]])
    b_ub = np.concatenate([np.zeros(2 * m), [1.0]])
    bounds = [(None, None)] * k + [(0, None)] * m
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"sensitivity LP failed: {res.message}")
    return float(min(1.0, max(0.0, -res.fun)))


def exact_sensitivity(A, b, i: int) -> float:
    """Class-wise L1 sensitivity of row i over the full matrix."""
    rows = augment(A, b)
    cls = norm_class(rows)
    if cls[i] == NO_CLASS:
        return 0.0
    members = np.flatnonzero(cls == cls[i])
    return l1_sensitivity(rows[members], int(np.searchsorted(members, i)))


def exact_sensitivities(A, b) -> np.ndarray:
    rows = augment(A, b)
    cls = norm_class(rows)
    out = np.zeros(len(rows))
    for k in np.unique(cls[cls != NO_CLASS]):
        members = np.flatnonzero(cls == k)
        for pos, i in enumerate(members):
            out[i] = l1_sensitivity(rows[members], pos)
    return out


def exact_sensitive_set(A, b, threshold: float) -> set[int]:
    """Exactly {i : exact_sensitivity(A, b, i) >= threshold}, with cheap certificates first.

    ``y = G^+ a_i`` gives a feasible ratio (a lower bound) and sqrt of the
    leverage an upper bound; the LP runs only for rows the two do not settle.
    """
    rows = augment(A, b)
    cls = norm_class(rows)
    out: set[int] = set()
    for k in np.unique(cls[cls != NO_CLASS]):
        members = np.flatnonzero(cls == k)
        R = rows[members]
        pinv = np.linalg.pinv(R.T @ R, hermitian=True)
        Y = R @ pinv
        own = np.abs(np.einsum("ij,ij->i", R, Y))
        spread = np.abs(Y @ R.T).sum(axis=1)
        lower = np.divide(own, spread, out=np.zeros_like(own), where=spread > 0)
        upper = np.sqrt(np.clip(own, 0.0, 1.0))
        for pos, i in enumerate(members):
            if lower[pos] >= threshold:
                out.add(int(i))
            elif upper[pos] >= threshold and l1_sensitivity(R, pos) >= threshold:
                out.add(int(i))
    return out


def sensitivity_threshold(T: int, d: int, c: float = 200.0) -> float:
    return 1.0 / (c * T * d)


@dataclass
class SensitivityRecord:
    id: int
    a: np.ndarray
    b: float
    upper_bound: float
    active: bool = True


def _leverage(gram: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """rows_i^T gram^+ rows_i for one gram or a stack of them."""
    pinv = np.linalg.pinv(gram, hermitian=True)
    if pinv.ndim == 2:
        return np.clip(np.einsum("ij,jk,ik->i", rows, pinv, rows), 0.0, 1.0)
    return np.clip(np.einsum("ij,ijk,ik->i", rows, pinv, rows), 0.0, 1.0)


class SensitivityTracker:
    """Streaming superset of the rows with class-wise sensitivity at or above a threshold.

    Between batches the bound of a row is sqrt of its leverage in its class's
    prefix Gram matrix.  Every ``batch`` arrivals retained rows are re-checked:
    the leverage bound is refreshed, and rows still above the threshold whose
    cheap lower bound does not settle them get an LP over the retained rows of
    their class, which can only overstate the prefix sensitivity.
    """

    def __init__(self, d: int, T: int = 1, threshold: float | None = None, c: float = 200.0,
                 batch: int = 64, lp_limit: int = 1500):
        self.d = d
        self.threshold = sensitivity_threshold(T, d, c) if threshold is None else float(threshold)
        self.batch = batch
        self.lp_limit = lp_limit
        self.grams: dict[int, np.ndarray] = {}
        self.counts: dict[int, int] = {}
        self.retained: dict[int, SensitivityRecord] = {}
        self._class_of: dict[int, int] = {}
        self._since = 0
        self.arrivals = 0
        self.lp_calls = 0

    def observe(self, id_: int, a, b: float):
        """Process one row; returns (kept, demoted records)."""
        kept, demoted = self.observe_many([id_], np.atleast_2d(a), [b])
        return bool(kept[0]), demoted

    def observe_many(self, ids, A, b):
        """Process rows in stream order.

        Returns the mask of rows retained on arrival and every record demoted
        during the call, including rows of this call that were admitted and
        dropped again.  Each row therefore leaves the tracker exactly once.
        """
        ids = np.asarray(ids, dtype=np.int64)
        A = np.atleast_2d(np.asarray(A, dtype=float))
        b = np.asarray(b, dtype=float)
        kept = np.zeros(len(ids), dtype=bool)
        demoted: list[SensitivityRecord] = []
        lo = 0
        while lo < len(ids):
            hi = min(len(ids), lo + self.batch - self._since)
            kept[lo:hi] = self._ingest(ids[lo:hi], A[lo:hi], b[lo:hi])
            self._since += hi - lo
            if self._since >= self.batch:
                demoted += self.recheck()
                self._since = 0
            lo = hi
        return kept, demoted

    def _ingest(self, ids, A, b) -> np.ndarray:
        rows = augment(A, b)
        cls = norm_class(rows)
        bound = np.zeros(len(ids))
        k1 = self.d + 1
        for k in np.unique(cls[cls != NO_CLASS]):
            sel = np.flatnonzero(cls == k)
            R = rows[sel]
            base = self.grams.get(k, np.zeros((k1, k1)))
            prefix = base + np.cumsum(R[:, :, None] * R[:, None, :], axis=0)
            bound[sel] = np.sqrt(_leverage(prefix, R))
            self.grams[k] = prefix[-1]
            self.counts[k] = self.counts.get(k, 0) + len(sel)
        keep = bound >= self.threshold
        for pos in np.flatnonzero(keep):
            i = int(ids[pos])
            self.retained[i] = SensitivityRecord(i, A[pos].copy(), float(b[pos]), float(bound[pos]))
            self._class_of[i] = int(cls[pos])
        self.arrivals += len(ids)
        return keep

    def recheck(self) -> list[SensitivityRecord]:
        """Tighten bounds of retained rows; return the ones that fell below threshold."""
        demoted = []
        by_class: dict[int, list[int]] = {}
        for i in self.retained:
            by_class.setdefault(self._class_of[i], []).append(i)
        for k, members in by_class.items():
            recs = [self.retained[i] for i in members]
            R = augment(np.array([r.a for r in recs]), np.array([r.b for r in recs]))
            lev = _leverage(self.grams[k], R)
            fresh = np.sqrt(lev)
            floor = np.sqrt(lev / max(1, self.counts[k]))
            for pos, rec in enumerate(recs):
                rec.upper_bound = min(rec.upper_bound, float(fresh[pos]))
            ambiguous = [pos for pos, rec in enumerate(recs)
                         if rec.upper_bound >= self.threshold > floor[pos]]
            if ambiguous and len(recs) <= self.lp_limit:
                for pos in ambiguous:
                    self.lp_calls += 1
                    recs[pos].upper_bound = min(recs[pos].upper_bound, l1_sensitivity(R, pos))
            for rec in recs:
                if rec.upper_bound < self.threshold:
                    rec.active = False
                    demoted.append(rec)
        for rec in demoted:
            del self.retained[rec.id]
            del self._class_of[rec.id]
        return demoted

    def finish(self) -> list[SensitivityRecord]:
        self._since = 0
        return self.recheck()

    def retained_ids(self) -> set[int]:
        return set(self.retained)
