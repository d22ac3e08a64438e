"""Second-order extension: sampled per-row Hessians and a Newton-type loop.

An order-p sketch stores ``a^(p-1) (x) [a, b]`` per row; contracting p-2
free indices with x gives ``w(r) a a^T`` with ``w(r) = r^(p-2)``.  Order 2
is therefore the first-order structure itself, and order 3 covers losses
whose Hessian is linear in the residual.  Both orders reuse the sampler and
the bucket/freshness machinery of the first-order engine unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import ContractViolation
from .gsampler import BoostedSampler, SampleOutcome, SamplerBank, SamplerConfig
from .measures import Kind, MeasureSpec
from .oracle import ExactInstance
from .sensitivity import SensitivityRecord, SensitivityTracker, sensitivity_threshold
from .sgd import SGDConfig, SGDEngine

MAX_TENSOR_ENTRIES = 10**6


def check_order(d: int, order: int) -> None:
    if order not in (2, 3):
        raise ContractViolation(f"tensor order must be 2 or 3, got {order}")
    if d**order > MAX_TENSOR_ENTRIES:
        raise ContractViolation(f"d^p = {d**order} exceeds the {MAX_TENSOR_ENTRIES} entry cap")


def tensor_config(config: SamplerConfig, order: int) -> SamplerConfig:
    check_order(config.d, order)
    return replace(config, order=order)


def tensor_bank(config: SamplerConfig, order: int, seed: int = 0, n_instances: int = 1) -> SamplerBank:
    """An order-p sampler bank; at p = 2 it is byte-identical to the first-order one."""
    return SamplerBank(tensor_config(config, order), seed, n_instances)


def tensor_sampler(config: SamplerConfig, order: int, seed: int = 0, delta: float = 0.5) -> BoostedSampler:
    return BoostedSampler(tensor_config(config, order), seed, delta)


@dataclass(frozen=True)
class HessianSample:
    ok: bool
    id: int | None = None
    V: np.ndarray | None = None
    p_hat: float = 0.0
    reason: str = ""


def hsample(sampler: BoostedSampler | SamplerBank, x, instance: int | None = None) -> HessianSample:
    """One noisy per-row Hessian ``V`` (d x d) with its estimated probability.

    A ``BoostedSampler`` tries its instances in turn; a bank answers from the
    given instance (0 by default).
    """
    if isinstance(sampler, BoostedSampler):
        out: SampleOutcome = sampler.sample(x, hessian=True)
        d = sampler.config.d
    else:
        out = sampler.sample(x, instance or 0, hessian=True)
        d = sampler.config.d
    if not out.ok:
        return HessianSample(False, reason=out.reason)
    return HessianSample(True, out.id, out.v.reshape(d, d), out.p_hat)


class HessianSensitivity:
    """Streaming superset of rows whose Frobenius share of the Hessian mass can be large.

    For order 2 the share ``|a_i|^2 / sum_j |a_j|^2`` does not depend on x
    and is tracked exactly over the prefix.  For order 3 ``|H_i|_F`` is
    ``|r_i| |a_i|^2``, the residual of the row ``|a_i|^2 [a_i, -b_i]``, so the
    first-order tracker runs on rescaled rows.
    """

    def __init__(self, d: int, order: int = 2, T: int = 1, threshold: float | None = None,
                 c: float = 200.0, batch: int = 64):
        check_order(d, order)
        self.d = d
        self.order = order
        self.threshold = sensitivity_threshold(T, d, c) if threshold is None else float(threshold)
        self.batch = batch
        self.retained: dict[int, SensitivityRecord] = {}
        self._mass = 0.0
        self._since = 0
        self._inner = SensitivityTracker(d, T, self.threshold, c, batch) if order == 3 else None
        self._rows: dict[int, tuple[np.ndarray, float]] = {}

    def observe_many(self, ids, A, b):
        ids = np.asarray(ids, dtype=np.int64)
        A = np.atleast_2d(np.asarray(A, dtype=float))
        b = np.asarray(b, dtype=float)
        if self._inner is not None:
            sq = np.einsum("ij,ij->i", A, A)
            kept, demoted = self._inner.observe_many(ids, A * sq[:, None], b * sq)
            for pos in np.flatnonzero(kept):
                self._rows[int(ids[pos])] = (A[pos].copy(), float(b[pos]))
            self._sync()
            return kept, [self._original(r) for r in demoted]
        sq = np.einsum("ij,ij->i", A, A)
        prefix = self._mass + np.cumsum(sq)
        share = np.divide(sq, prefix, out=np.zeros_like(sq), where=prefix > 0)
        kept = share >= self.threshold
        demoted = []
        for pos in range(len(ids)):
            if kept[pos]:
                i = int(ids[pos])
                self.retained[i] = SensitivityRecord(i, A[pos].copy(), float(b[pos]), float(share[pos]))
            self._since += 1
            if self._since >= self.batch:
                self._mass = prefix[pos]
                demoted += self.recheck()
                self._since = 0
        self._mass = prefix[-1] if len(prefix) else self._mass
        return kept, demoted

    def observe(self, id_: int, a, b: float):
        kept, demoted = self.observe_many([id_], np.atleast_2d(a), [b])
        return bool(kept[0]), demoted

    def _original(self, rec: SensitivityRecord) -> SensitivityRecord:
        a, b = self._rows.pop(rec.id)
        return SensitivityRecord(rec.id, a, b, rec.upper_bound, False)

    def _sync(self) -> None:
        self.retained = {i: SensitivityRecord(i, *self._rows[i], r.upper_bound)
                         for i, r in self._inner.retained.items()}

    def recheck(self) -> list[SensitivityRecord]:
        if self._inner is not None:
            demoted = [self._original(r) for r in self._inner.recheck()]
            self._sync()
            return demoted
        demoted = []
        for rec in list(self.retained.values()):
            rec.upper_bound = float(rec.a @ rec.a) / self._mass if self._mass > 0 else 0.0
            if rec.upper_bound < self.threshold:
                rec.active = False
                demoted.append(rec)
                del self.retained[rec.id]
        return demoted

    def finish(self) -> list[SensitivityRecord]:
        self._since = 0
        return self.recheck()

    def retained_ids(self) -> set[int]:
        return set(self.retained)


class HessianEngine(SGDEngine):
    """Bucketed order-p Hessian samplers with explicit storage of Frobenius-heavy rows."""

    kind = "hessian"

    def __init__(self, config: SGDConfig, order: int = 2):
        check_order(config.d, order)
        super().__init__(config, order=order, hessian=True)

    def _make_tracker(self):
        c = self.config
        return HessianSensitivity(c.d, self.order, c.T, c.sens_threshold, c.sens_c)

    def sample_hessian(self, x, t: int):
        """(unbiased estimate of the average ``w(r) a a^T``, ledger key, row) from one fresh draw."""
        got = self.draw(x, t)
        d = self.config.d
        if got is None:
            return np.zeros((d, d)), None, None
        j, s, row, _, w, p_hat = got
        return w.reshape(d, d) / (self.n_rows * p_hat), (j, s), row


def newton(x, H, g, rcond: float = 1e-10) -> np.ndarray:
    """x - H^{-1} g, with the pseudo-inverse when H is singular or nearly so."""
    H = np.asarray(H, dtype=float)
    if np.linalg.cond(H) < 1.0 / rcond:
        step = np.linalg.solve(H, g)
    else:
        step = np.linalg.pinv(H, rcond=rcond, hermitian=True) @ g
    return np.asarray(x, dtype=float) - step


# Sketched objects are w(r) a a^T.  Order 2 pairs with squared residuals
# (Hessian 2 a a^T), order 3 with |r|^3 / 3 (Hessian 2 |r| a a^T, sign
# restored per draw from the trace).
HESSIAN_SCALE = 2.0


@dataclass
class HessianTrajectory:
    iterates: list = field(default_factory=list)
    hessians: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    ledger: dict = field(default_factory=dict)
    objective: list = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["step,rows,objective"]
        for t, rows in enumerate(self.rows):
            obj = "" if t >= len(self.objective) else f"{self.objective[t]:.12g}"
            lines.append(f"{t},{';'.join(str(r) for r in rows)},{obj}")
        return "\n".join(lines) + "\n"


def hessian_run(
    engine: HessianEngine,
    x0,
    grad: Callable[[np.ndarray], np.ndarray],
    T: int | None = None,
    oracle: Callable = newton,
    s: int | None = None,
    objective: Callable[[np.ndarray], float] | None = None,
    reg_hessian: np.ndarray | None = None,
) -> HessianTrajectory:
    """Second-order loop: each step averages ``s`` sampled Hessians from fresh samplers.

    ``s`` defaults to ``5 d``; far fewer rank-one draws leave directions of the
    estimate nearly empty and undamped Newton then overshoots along them.
    ``grad`` returns the exact full gradient at x; ``reg_hessian`` is added to
    every Hessian estimate (e.g. ``2 lambda I`` for ridge).
    """
    engine.finish()
    T = engine.config.T if T is None else T
    s = 5 * engine.config.d if s is None else s
    if s < 1:
        raise ContractViolation("batch size must be positive")
    x = np.asarray(x0, dtype=float).copy()
    traj = HessianTrajectory([x.copy()])
    for t in range(T):
        H = np.zeros((engine.config.d, engine.config.d))
        rows = []
        for _ in range(s):
            V, _, row = engine.sample_hessian(x, t)
            if engine.order == 3 and np.trace(V) < 0:
                V = -V
            H += V / s
            rows.append(row)
        H = HESSIAN_SCALE * H
        if reg_hessian is not None:
            H = H + reg_hessian
        x = oracle(x, H, grad(x))
        traj.iterates.append(x.copy())
        traj.hessians.append(H)
        traj.rows.append(rows)
        if objective is not None:
            traj.objective.append(float(objective(x)))
    traj.ledger = dict(engine.ledger)
    return traj


def build_hessian_engine(A, b, config: SGDConfig, order: int = 2) -> HessianEngine:
    engine = HessianEngine(config, order)
    engine.ingest_many(np.arange(len(A)), A, b)
    engine.finish()
    return engine



def newton_problem(A, b, order: int = 2, measure: MeasureSpec | None = None):
    """(objective, exact mean gradient, regularizer Hessian) matching an order's sampled Hessians.

    Order 2 pairs with least squares, optionally ridge-regularized; order 3
    with the mean of ``|r|^3 / 3``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float)
    measure = measure or MeasureSpec(Kind.L2)
    if order == 2:
        if measure.kind not in (Kind.L2, Kind.RIDGE):
            raise ContractViolation(f"second-order runs support l2 and ridge, not {measure.kind.value}")
        inst = ExactInstance(A, b, measure)
        reg = 2.0 * measure.lam * np.eye(A.shape[1]) if measure.kind is Kind.RIDGE else None
        return inst.objective, inst.mean_gradient, reg
    check_order(A.shape[1], order)
    if measure.kind is not Kind.L2:
        raise ContractViolation("order 3 runs use the cubic loss; pass the l2 measure")

    def objective(x):
        r = A @ np.asarray(x, dtype=float) - b
        return float(np.mean(np.abs(r) ** 3) / 3.0)

    def grad(x):
        r = A @ np.asarray(x, dtype=float) - b
        return (r * np.abs(r)) @ A / len(A)

    return objective, grad, None
