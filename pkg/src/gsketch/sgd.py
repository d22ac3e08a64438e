"""Single-pass importance-sampled SGD.

Rows are hashed into ``n_partitions = ceil(c_partitions T)`` buckets.  Each bucket gets a
mass estimator (all estimators share one bank) and ``n_samplers`` boosted samplers,
one of which is consumed per visit so that no sampler ever sees an iterate
that depends on its own randomness.  Rows whose sensitivity may be large are
kept verbatim instead and enter the bucket draw with their exact masses.

Only stream order matters during ingestion.  With ``lazy=True`` a bucket's
rows are spooled and each sampler is built on first use from exactly the rows
it would have seen; outputs match eager construction.
"""
from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractViolation, EstimationFailure, FreshnessExhausted, StepFailed
from .gsampler import SamplerBank, SamplerConfig, boost_count
from .hashing import PolyHash, derive_seed
from .measures import Kind, MeasureSpec, regularizer_gradient, sampling_gradients
from .oracle import ExactInstance, exact_importance_distribution
from .sensitivity import SensitivityTracker

_L2 = MeasureSpec(Kind.L2)


@dataclass(frozen=True)
class SGDConfig:
    T: int
    d: int
    n: int
    eta: float | tuple | None = None
    measure: MeasureSpec = _L2
    eps: float = 0.5
    alpha: float | None = None
    delta: float | None = None
    c_partitions: float = 4.0
    c_s: float = 2.0
    c_r: float = 4.0
    c_rep: float = 3.0
    reps: int | None = None
    n_buckets: int | None = None
    id_mode: str = "candidates"
    use_sensitivity: bool = True
    sens_c: float = 200.0
    sens_threshold: float | None = None
    lazy: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.T < 1:
            raise ContractViolation("T must be positive")
        if isinstance(self.eta, list):
            object.__setattr__(self, "eta", tuple(self.eta))
        if isinstance(self.eta, tuple) and len(self.eta) < self.T:
            raise ContractViolation("step schedule shorter than T")

    @property
    def n_partitions(self) -> int:
        return max(self.T, int(math.ceil(self.c_partitions * self.T)))

    @property
    def samplers_per_bucket(self) -> int:
        return max(1, int(math.ceil(self.c_s * math.log2(max(2, self.T * self.d)))))

    @property
    def step_delta(self) -> float:
        """Per-step failure budget of a boosted sampler; defaults to 1/(100 T)."""
        return self.delta if self.delta is not None else 1.0 / (100 * self.T)

    def step_size(self, t: int) -> float:
        if self.eta is None:
            return 1.0 / math.sqrt(self.T)
        if isinstance(self.eta, tuple):
            return float(self.eta[t])
        return float(self.eta)

    def sampler_config(self, order: int = 2) -> SamplerConfig:
        return SamplerConfig(
            d=self.d, n=self.n, eps=self.eps, alpha=self.alpha, T=self.T, order=order, n_buckets=self.n_buckets,
            reps=self.reps, c_rep=self.c_rep, id_mode=self.id_mode,
        )


@dataclass
class StepRecord:
    step: int
    bucket: int = -1
    instance: int = -1
    row: int | str | None = None
    p_hat: float = 0.0
    w_norm: float = 0.0
    proxy: float = 0.0
    objective: float | None = None


@dataclass
class SGDTrajectory:
    iterates: list = field(default_factory=list)
    records: list = field(default_factory=list)
    ledger: dict = field(default_factory=dict)
    estimates: list = field(default_factory=list)

    @property
    def average(self) -> np.ndarray:
        """Mean of x_1 .. x_T."""
        return np.mean(self.iterates[1:], axis=0) if len(self.iterates) > 1 else self.iterates[0]

    def proxies(self) -> np.ndarray:
        return np.array([r.proxy for r in self.records])

    def to_csv(self) -> str:
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(["step", "bucket", "instance", "row", "p_hat", "w_norm", "objective"])
        for r in self.records:
            obj = "" if r.objective is None else f"{r.objective:.12g}"
            row = "" if r.row is None else r.row
            out.writerow([r.step, r.bucket, r.instance, row, f"{r.p_hat:.12g}", f"{r.w_norm:.12g}", obj])
        return buf.getvalue()


class SGDEngine:
    """Bucketed samplers, estimators and explicit heavy rows for T importance-sampled steps.

    ``hessian=True`` with ``order`` 2 or 3 samples per-row Hessian matrices
    instead of gradients; the second-order loop builds on that.
    """

    kind = "gradient"

    def __init__(self, config: SGDConfig, order: int = 2, hessian: bool = False):
        self.config = config
        self.order = order
        self.hessian = hessian
        seed = config.seed
        self.scfg = config.sampler_config(order)
        self.n_partitions = config.n_partitions
        self.n_samplers = config.samplers_per_bucket
        self.n_tries = boost_count(config.step_delta, config.c_r)
        self._bucket_hash = PolyHash(derive_seed(seed, "bucket"), 2)
        self.estimators = SamplerBank(self.scfg, derive_seed(seed, "estimator"), self.n_partitions)
        self.tracker = self._make_tracker() if config.use_sensitivity else None
        self._spool: dict[int, list] = {}
        self._samplers: dict[tuple[int, int], ChunkedSampler] = {}
        self.next_sampler = np.zeros(self.n_partitions, dtype=np.int64)
        self.ledger: dict[tuple[int, int], int] = {}
        self.n_rows = 0
        self.epoch = 0
        self.frozen = False
        self._heavy = None
        self._rng = np.random.default_rng(derive_seed(seed, "steps"))

    def _make_tracker(self):
        c = self.config
        return SensitivityTracker(c.d, c.T, c.sens_threshold, c.sens_c)

    # ingestion
    def bucket_of(self, ids) -> np.ndarray:
        return self._bucket_hash.buckets(np.asarray(ids, dtype=np.int64), self.n_partitions)

    def ingest(self, id_: int, a, b: float) -> None:
        self.ingest_many([id_], np.atleast_2d(a), [b])

    def ingest_many(self, ids, A, b) -> None:
        """Feed rows in stream order."""
        if self.frozen:
            raise ContractViolation("ingestion after the step loop began")
        ids = np.asarray(ids, dtype=np.int64)
        A = np.atleast_2d(np.asarray(A, dtype=float))
        b = np.asarray(b, dtype=float)
        if A.shape[1] != self.config.d:
            raise ContractViolation(f"rows have {A.shape[1]} features, engine expects {self.config.d}")
        self.n_rows += len(ids)
        if self.tracker is None:
            self._to_buckets(ids, A, b)
            return
        kept, demoted = self.tracker.observe_many(ids, A, b)
        self._to_buckets(ids[~kept], A[~kept], b[~kept])
        self._forward(demoted)

    def _forward(self, records) -> None:
        if records:
            self._to_buckets(np.array([r.id for r in records], dtype=np.int64),
                             np.array([r.a for r in records]), np.array([r.b for r in records]))

    def _to_buckets(self, ids, A, b) -> None:
        if not len(ids):
            return
        bucket = self.bucket_of(ids)
        self.estimators.insert(ids, A, b, bucket)
        for j in np.unique(bucket):
            sel = bucket == j
            self._spool.setdefault(int(j), []).append((ids[sel], A[sel], b[sel]))
            if not self.config.lazy:
                for s in range(self.n_samplers):
                    self._sampler(int(j), s).insert_all(ids[sel], A[sel], b[sel])

    def _sampler(self, j: int, s: int, build: bool = True) -> "ChunkedSampler":
        key = (j, s)
        if key not in self._samplers:
            seed = derive_seed(self.config.seed, "sampler", self.epoch, j, s)
            spool = self._spool.setdefault(j, []) if self.config.lazy else None
            self._samplers[key] = ChunkedSampler(self.scfg, seed, self.n_tries, spool)
        return self._samplers[key]

    def finish(self) -> None:
        """End of stream: settle the sensitivity tracker and freeze the estimators."""
        if self.frozen:
            return
        if self.tracker is not None:
            self._forward(self.tracker.finish())
        self.estimators.freeze()
        recs = list(self.tracker.retained.values()) if self.tracker else []
        ids = np.array([r.id for r in recs], dtype=np.int64)
        A = np.array([r.a for r in recs]).reshape(len(recs), self.config.d)
        b = np.array([r.b for r in recs])
        self._heavy = (ids, A, b, self.bucket_of(ids) if len(ids) else ids)
        self.frozen = True

    # stepping
    def _objects(self, A, b, x) -> np.ndarray:
        """Exact per-row sampled objects: gradient data terms or flattened Hessians."""
        if not self.hessian:
            return sampling_gradients(self.config.measure, A, b, x)
        outer = A[:, :, None] * A[:, None, :]
        if self.order == 3:
            outer = (A @ x - b)[:, None, None] * outer
        return outer.reshape(len(A), -1)

    def bucket_masses(self, x):
        """(q per bucket, heavy objects, heavy norms) at x."""
        plan = self.estimators.plan(x, self.config.measure, self.hessian)
        q, failed = plan.totals()
        if failed.any():
            raise EstimationFailure(f"estimator failed for buckets {np.flatnonzero(failed)[:5].tolist()}")
        q = q.copy()
        ids, A, b, hb = self._heavy
        objs = self._objects(A, b, x) if len(ids) else np.zeros((0, 1))
        norms = np.linalg.norm(objs, axis=1) if len(ids) else np.zeros(0)
        np.add.at(q, hb, norms)
        return q, objs, norms

    def draw(self, x, t: int):
        """One sampled object with its estimated probability; None when all mass vanishes."""
        x = np.asarray(x, dtype=float)
        q, objs, norms = self.bucket_masses(x)
        total = q.sum()
        if not total > 0:
            return None
        rng = self._rng
        j = int(rng.choice(self.n_partitions, p=q / total))
        ids, _, _, hb = self._heavy
        in_j = np.flatnonzero(hb == j) if len(ids) else np.zeros(0, np.int64)
        heavy_mass = norms[in_j].sum() if len(in_j) else 0.0
        if heavy_mass > 0 and rng.random() * q[j] < heavy_mass:
            k = in_j[rng.choice(len(in_j), p=norms[in_j] / heavy_mass)]
            w = objs[k]
            return j, -1, int(ids[k]), "heavy", w, float(np.linalg.norm(w) / total)
        s = int(self.next_sampler[j])
        if s >= self.n_samplers:
            raise FreshnessExhausted(t, j)
        self.next_sampler[j] += 1
        sampler = self._sampler(j, s)
        self.ledger[(j, s)] = self.ledger.get((j, s), 0) + 1
        out = sampler.sample(x, self.config.measure, self.hessian)
        if out is None:
            raise StepFailed(t, j)
        return j, s, out.id, "sampler", out.v, float(np.linalg.norm(out.v) / total)

    def step(self, x, t: int):
        if not self.frozen:
            self.finish()
        n = self.n_rows
        got = self.draw(x, t)
        reg = regularizer_gradient(self.config.measure, x)
        eta = self.config.step_size(t)
        if got is None:
            return np.asarray(x, float) - eta * reg, StepRecord(t)
        j, s, row, _, w, p_hat = got
        scaled = w / (n * p_hat)
        x_next = np.asarray(x, float) - eta * scaled - eta * reg
        rec = StepRecord(t, j, s, row, p_hat, float(np.linalg.norm(w)), float(scaled @ scaled))
        return x_next, rec

    def run(self, x0, objective=None) -> SGDTrajectory:
        self.finish()
        x = np.asarray(x0, dtype=float).copy()
        traj = SGDTrajectory([x.copy()])
        for t in range(self.config.T):
            x, rec = self.step(x, t)
            if objective is not None:
                rec.objective = float(objective(x))
            traj.iterates.append(x.copy())
            traj.records.append(rec)
        traj.ledger = dict(self.ledger)
        return traj

    def reset_samplers(self) -> None:
        """Forget all samplers and rebuild later ones from fresh seeds (lazy mode)."""
        self.epoch += 1
        self.next_sampler[:] = 0
        self._samplers.clear()

    def heavy_ids(self) -> np.ndarray:
        if not self.frozen:
            return np.array(sorted(self.tracker.retained_ids()) if self.tracker else [], dtype=np.int64)
        return self._heavy[0]

    def to_bytes(self) -> bytes:
        """State dump: JSON header, heavy rows, then the estimator tables."""
        self.finish()
        cfg = asdict(self.config)
        cfg["measure"] = {k: (v.value if hasattr(v, "value") else v) for k, v in asdict(self.config.measure).items()}
        ids, A, b, _ = self._heavy
        header = {
            "config": cfg,
            "order": self.order,
            "hessian": self.hessian,
            "n_rows": self.n_rows,
            "ledger": [[j, s, c] for (j, s), c in sorted(self.ledger.items())],
            "heavy": len(ids),
        }
        meta = json.dumps(header, sort_keys=True, default=str).encode()
        blobs = [self.estimators.cs1.to_bytes(), self.estimators.cs2.to_bytes()]
        parts = [b"GSKE", struct.pack("<HI", 1, len(meta)), meta,
                 ids.astype("<i8").tobytes(), A.astype("<f8").tobytes(), b.astype("<f8").tobytes()]
        for blob in blobs:
            parts += [struct.pack("<Q", len(blob)), blob]
        return b"".join(parts)


class ChunkedSampler:
    """A boosted sampler whose R instances are materialized a few at a time.

    Instances are tried in order and later chunks are only built when every
    earlier instance failed.  Chunks are slices of one instance family, so
    the result equals that of a single R-instance bank.
    """

    chunk = 4

    def __init__(self, config: SamplerConfig, seed: int, R: int, spool: list | None):
        self.config = config
        self.seed = seed
        self.n_tries = R
        self.spool = spool
        self.banks: list[SamplerBank] = []

    def _bank(self, k: int) -> SamplerBank:
        while len(self.banks) <= k:
            lo = len(self.banks) * self.chunk
            bank = SamplerBank(self.config, self.seed, min(self.chunk, self.n_tries - lo), lo)
            for ids, A, b in self.spool or []:
                bank.insert_all(ids, A, b)
            self.banks.append(bank)
        return self.banks[k]

    def insert_all(self, ids, A, b) -> None:
        """Eager ingestion into every instance."""
        for k in range(math.ceil(self.n_tries / self.chunk)):
            self._bank(k).insert_all(ids, A, b)

    def sample(self, x, measure, hessian=False):
        """First successful outcome over all R instances, or None."""
        for k in range(math.ceil(self.n_tries / self.chunk)):
            bank = self._bank(k)
            if not bank.frozen:
                bank.freeze()
            for r in range(bank.n_instances):
                try:
                    out = bank.sample(x, r, measure, hessian)
                except EstimationFailure:
                    continue
                if out.ok:
                    return out
        return None


def build_engine(A, b, config: SGDConfig, **kw) -> SGDEngine:
    engine = SGDEngine(config, **kw)
    engine.ingest_many(np.arange(len(A)), A, b)
    engine.finish()
    return engine


def run_baseline(A, b, x0, config: SGDConfig, mode: str = "uniform") -> SGDTrajectory:
    """Reference SGD with exact gradients: uniform, exact importance, or full gradient descent."""
    inst = ExactInstance(A, b, config.measure)
    n = inst.n
    rng = np.random.default_rng(derive_seed(config.seed, "baseline", mode))
    x = np.asarray(x0, dtype=float).copy()
    traj = SGDTrajectory([x.copy()])
    for t in range(config.T):
        eta = config.step_size(t)
        reg = regularizer_gradient(config.measure, x)
        G = inst.gradients(x)
        if mode == "full_gd":
            direction = G.mean(axis=0)
            rec = StepRecord(t, row="all", p_hat=1.0, w_norm=float(np.linalg.norm(direction)))
        else:
            if mode == "uniform":
                i = int(rng.integers(n))
                p = 1.0 / n
            elif mode == "exact_importance":
                try:
                    probs = exact_importance_distribution(inst, x)
                except ValueError:
                    traj.iterates.append(x.copy())
                    traj.records.append(StepRecord(t))
                    x = x - eta * reg
                    continue
                i = int(rng.choice(n, p=probs))
                p = float(probs[i])
            else:
                raise ContractViolation(f"unknown baseline mode {mode!r}")
            direction = G[i] / (n * p)
            rec = StepRecord(t, row=i, p_hat=p, w_norm=float(np.linalg.norm(G[i])))
        rec.proxy = float(direction @ direction)
        x = x - eta * direction - eta * reg
        rec.objective = inst.objective(x)
        traj.iterates.append(x.copy())
        traj.records.append(rec)
    return traj


def step_variance(engine: SGDEngine, x, draws: int) -> tuple[float, np.ndarray]:
    """Empirical variance of w / (n p_hat) at a fixed x over repeated draws.

    Every draw needs fresh samplers, so after each draw the samplers are
    dropped and later ones are rebuilt under a new epoch seed (lazy mode
    only).  Returns the variance and the empirical mean direction.
    """
    if not engine.config.lazy:
        raise ContractViolation("repeated draws at a fixed x need lazy samplers")
    vecs = []
    n = engine.n_rows
    for t in range(draws):
        got = engine.draw(x, t)
        if got is None:
            vecs.append(np.zeros_like(np.asarray(x, float)))
            continue
        *_, w, p_hat = got
        vecs.append(w / (n * p_hat))
        engine.reset_samplers()
    V = np.array(vecs)
    mean = V.mean(axis=0)
    return float(np.mean(np.sum((V - mean) ** 2, axis=1))), mean
