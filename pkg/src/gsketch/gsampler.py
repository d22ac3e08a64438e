"""Single-pass sampler of noisy gradients with probability close to their norm share.

Rows are split into norm classes ``2^k <= |a| < 2^(k+1)``; inside a class each
row joins nested substreams ``l = 1, 2, ...`` with probability ``2^(1-l)``.
Every (instance, class, substream) triple is one cell of a shared detection
table (CS1) and a shared estimate table (CS2).  At query time reported rows
are sorted into randomized geometric level sets, each level's mass is read
off the substream matched to its size, and a class, a level and a member are
drawn in turn.

A ``SamplerBank`` holds many independent instances in one store so that they
can be queried together.  ``GSampler`` and ``BoostedSampler`` are the usual
single-purpose views on top of it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, EstimationFailure
from ._backend import median_norms
from .estimator import guess_and_verify
from .hashing import PolyHash, derive_seed, instance_uniform
from .levels import depth_table, dummy_spec, log2n, n_levels, n_substreams
from .measures import (
    Kind,
    MeasureSpec,
    gradient_from_estimates,
    gradient_norm_from_estimates,
    smoothness_alpha,
)
from .sketch import (
    BucketTable,
    CoordinateMedianSketch,
    GradientView,
    HessianView,
    default_reps,
    lower_median,
)

CLASS_SHIFT = 32
N_CLASSES = 64
NO_CLASS = -(1 << 30)
_L2 = MeasureSpec(Kind.L2)


def norm_class(A) -> np.ndarray:
    """floor(log2 |a|) per row; ``NO_CLASS`` for zero rows."""
    norms = np.linalg.norm(np.atleast_2d(np.asarray(A, dtype=float)), axis=1)
    _, exp = np.frexp(norms)
    return np.where(norms > 0, exp - 1, NO_CLASS).astype(np.int64)


@dataclass(frozen=True)
class SamplerConfig:
    """Sizes and constants of a sampler bank.

    ``n`` bounds the stream length and drives level, substream and repetition
    counts.  ``eps`` is the target sampling accuracy; the sketch accuracy is
    ``alpha = eps / 4`` unless given.

    Each repetition has ``ceil(c_b log2(n) / alpha^3)`` buckets, the width
    that resolves rows holding an ``alpha^3 / log n`` share.  Level j is read
    from substream ``max(1, floor(log2(alpha^2 (1+alpha)^j / (c_depth log2 n))))``
    with ``c_depth = 2 / alpha`` by default, so that a level needs about a
    ``1 / (2 log n)`` share of its class to clear the ``1/alpha^2`` report cut.
    """

    d: int
    n: int
    eps: float = 0.5
    alpha: float | None = None
    T: int = 1
    order: int = 2
    n_buckets: int | None = None
    reps: int | None = None
    c_b: float = 1.0
    c_rep: float = 3.0
    c_l: float = 2.0
    c_k: float = 2.0
    c_d: float = 1.0
    c_depth: float | None = None
    id_mode: str = "candidates"
    id_universe: int | None = None

    def __post_init__(self):
        if self.alpha is None:
            object.__setattr__(self, "alpha", smoothness_alpha(_L2, self.eps))
        if not 0 < self.alpha < 1:
            raise ContractViolation("alpha must lie in (0, 1)")
        if self.c_depth is None:
            object.__setattr__(self, "c_depth", 2.0 / self.alpha)
        if self.id_mode not in ("candidates", "dyadic"):
            raise ContractViolation(f"unknown id mode {self.id_mode!r}")
        if self.d < 1 or self.n < 1:
            raise ContractViolation("d and n must be positive")

    @property
    def buckets(self) -> int:
        return self.n_buckets or int(math.ceil(self.c_b * log2n(self.n) / self.alpha**3))

    @property
    def repetitions(self) -> int:
        return self.reps or default_reps(self.n, self.T, self.c_rep)

    @property
    def levels(self) -> int:
        return n_levels(self.n, self.alpha, self.c_k)

    @property
    def id_bits(self) -> int:
        universe = self.id_universe or self.n
        return max(1, int(math.ceil(math.log2(max(universe, 2)))))


@dataclass(frozen=True)
class SampleOutcome:
    """Either a sampled noisy gradient or a failure with a reason.

    ``reason`` is one of ``"dummy"``, ``"zero_mass"``, ``"estimation"`` or
    ``"exhausted"`` on failure.
    """

    ok: bool
    id: int | None = None
    v: np.ndarray | None = None
    p_hat: float = 0.0
    instance: int = -1
    reason: str = ""
    exhausted: bool = False

    @classmethod
    def fail(cls, reason: str, instance: int = -1, exhausted: bool = False) -> "SampleOutcome":
        return cls(False, reason=reason, instance=instance, exhausted=exhausted)


@dataclass
class InstancePlan:
    """Query-time state of one instance: per-class masses and level members."""

    classes: np.ndarray
    mass_est: np.ndarray
    guess: np.ndarray
    level_mass: np.ndarray
    dummy_mass: np.ndarray
    dummy_count: np.ndarray
    members: np.ndarray
    offsets: np.ndarray
    failed: bool
    ids: np.ndarray = field(repr=False)
    vectors: np.ndarray = field(repr=False)
    norms: np.ndarray = field(repr=False)

    @property
    def total(self) -> float:
        return float(self.mass_est.sum())

    @property
    def dummy_total(self) -> float:
        return float(self.dummy_mass.sum())

    def _cell_probs(self):
        # class by total mass with dummies, then level by its share of it
        within = self.level_mass + self.dummy_mass
        total = within.sum()
        return (within / total).ravel() if total > 0 else np.zeros(within.size)

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Indices into ``ids``/``vectors``; -1 marks a dummy draw."""
        if self.failed:
            raise EstimationFailure("no self-consistent guess for at least one norm class")
        if self.total <= 0:
            return np.full(size, -1, dtype=np.int64)
        probs = self._cell_probs()
        cell = rng.choice(len(probs), size=size, p=probs / probs.sum())
        real_mass = self.level_mass.ravel()[cell]
        dummy = rng.random(size) * (real_mass + self.dummy_mass.ravel()[cell]) >= real_mass
        lo = self.offsets[cell]
        count = self.offsets[cell + 1] - lo
        pick = (rng.random(size) * count).astype(np.int64)
        out = np.full(size, -1, dtype=np.int64)
        hit = ~dummy & (count > 0)
        out[hit] = self.members[lo[hit] + pick[hit]]
        return out

    def probabilities(self) -> tuple[np.ndarray, np.ndarray]:
        """Exact output law of ``draw`` as (ids, probability); the remainder is the dummy share."""
        if self.total <= 0:
            return np.zeros(0, np.int64), np.zeros(0)
        within = self.level_mass + self.dummy_mass
        counts = np.diff(self.offsets)
        each = np.where(counts > 0, self.level_mass.ravel() / within.sum() / np.maximum(counts, 1), 0.0)
        out = np.zeros(len(self.ids))
        np.add.at(out, self.members, np.repeat(each, counts))
        return self.ids, out


class QueryPlan:
    """Plans for all instances of a bank at one query point.

    Per-instance views are assembled on first access; ``totals`` answers the
    mass of every instance at once.
    """

    def __init__(self, bank, ids, gnorm, group, labels, lev, guess, agg, masses, status, rebuild):
        # sizes only, not the bank: the bank caches its plan, and a cycle would
        # keep both alive until the next full collection
        self.n_instances, self.n_levels, self.dummies = bank.n_instances, bank.n_levels, bank.dummies
        self.ids, self.gnorm = ids, gnorm
        self.labels = labels
        self.guess, self.agg, self.masses, self.status = guess, agg, masses, status
        self._rebuild = rebuild
        rows = np.flatnonzero(lev >= 0)
        order = np.lexsort((lev[rows], group[rows]))
        self.member_rows = rows[order]
        self.member_cell = group[self.member_rows] * self.n_levels + lev[self.member_rows]
        self._views: dict[int, InstancePlan] = {}

    def vectors(self, rows) -> np.ndarray:
        """Full estimates for the given reports, built on demand."""
        return self._rebuild(np.asarray(rows, dtype=np.int64))

    def totals(self) -> tuple[np.ndarray, np.ndarray]:
        """(estimated mass, estimation failed) per instance."""
        n = self.n_instances
        inst = self.labels // N_CLASSES
        mass = np.bincount(inst, weights=self.agg, minlength=n).astype(float)
        failed = np.bincount(inst, weights=(self.status == -1), minlength=n) > 0
        return mass, failed

    def instance_view(self, instance: int) -> InstancePlan:
        if instance not in self._views:
            self._views[instance] = self._build(instance)
        return self._views[instance]

    def _build(self, i: int) -> InstancePlan:
        level_count = self.n_levels
        lo, hi = np.searchsorted(self.labels, [i * N_CLASSES, (i + 1) * N_CLASSES])
        gidx = np.arange(lo, hi)
        status = self.status[gidx]
        keep = status != 0
        gidx = gidx[keep]
        status = status[keep]
        m_lo, m_hi = np.searchsorted(self.member_cell, [lo * level_count, hi * level_count])
        mrows = self.member_rows[m_lo:m_hi]
        mcell = self.member_cell[m_lo:m_hi]
        # re-index level cells to the instance's nonempty classes
        pos = np.searchsorted(gidx, mcell // level_count) * level_count + mcell % level_count
        offsets = np.searchsorted(pos, np.arange(len(gidx) * level_count + 1))
        inst_rows = np.unique(mrows)
        vectors = self.vectors(inst_rows)
        ok = (status == 1)[:, None]
        return InstancePlan(
            classes=self.labels[gidx] % N_CLASSES - CLASS_SHIFT,
            mass_est=self.agg[gidx],
            guess=self.guess[gidx],
            level_mass=self.masses[gidx],
            dummy_mass=self.dummies.level_mass(self.guess[gidx]) * ok,
            dummy_count=self.dummies.counts[None, :] * ok,
            members=np.searchsorted(inst_rows, mrows),
            offsets=offsets,
            failed=bool((status == -1).any()),
            ids=self.ids[inst_rows],
            vectors=vectors,
            norms=np.linalg.norm(vectors, axis=1),
        )


class SamplerBank:
    """Many independent sampler instances sharing one pair of sparse tables."""

    def __init__(self, config: SamplerConfig, seed: int = 0, n_instances: int = 1, instance_offset: int = 0):
        self.config = config
        self.seed = int(seed)
        self.n_instances = int(n_instances)
        # instances offset..offset+n-1 of a larger family; any split rebuilds the same family
        self.instance_offset = int(instance_offset)
        cfg = config
        self.alpha = cfg.alpha
        self.n_levels = cfg.levels
        self.depths = depth_table(float(self.alpha), int(cfg.n), int(self.n_levels), float(cfg.c_depth))
        # substreams deeper than any level's depth are never read
        self.n_sub = int(min(n_substreams(cfg.n, cfg.c_l), self.depths.max()))
        self.cpi = N_CLASSES * self.n_sub
        common = dict(
            n_cells=self.n_instances * self.cpi,
            cells_per_instance=self.cpi,
            instance_offset=self.instance_offset,
            check_ids=False,
        )
        B, reps = cfg.buckets, cfg.repetitions
        dyadic = cfg.id_mode == "dyadic"
        self.cs1 = BucketTable(
            cfg.d, B, reps, derive_seed(seed, "cs1"), cfg.order,
            id_bits=cfg.id_bits if dyadic else 0, keep_candidates=not dyadic, **common,
        )
        self.cs2 = CoordinateMedianSketch(cfg.d, B, reps, derive_seed(seed, "cs2"), cfg.order, **common)
        self._member = PolyHash(derive_seed(seed, "substream"), 4, self.n_instances, self.instance_offset)
        global_ids = np.arange(self.instance_offset, self.instance_offset + self.n_instances)
        self.boundary_shift = 0.5 + 0.5 * instance_uniform(derive_seed(seed, "gamma"), global_ids)
        self.dummies = dummy_spec(float(self.alpha), int(cfg.n), int(self.n_levels), float(cfg.c_d))
        self.frozen = False
        self._seen: set[tuple[int, int]] = set()
        self._raw = None
        self._plan_key = None
        self._plan = None
        self._rngs: dict[int, np.random.Generator] = {}

    # ingestion
    def substream_depth(self, ids, instances) -> np.ndarray:
        """Number of nested substreams admitting each (instance, id)."""
        u = self._member.uniform(ids, instances)
        levels = np.power(2.0, 1 - np.arange(1, self.n_sub + 1))
        return (u[:, None] < levels[None, :]).sum(axis=1)

    def insert(self, ids, A, b, instances=None) -> None:
        """Route rows to their class and substreams inside the given instances."""
        if self.frozen:
            raise ContractViolation("sampler is frozen; no further rows may be inserted")
        A = np.atleast_2d(np.asarray(A, dtype=float))
        ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
        b = np.atleast_1d(np.asarray(b, dtype=float))
        if instances is None:
            instances = np.zeros(len(ids), dtype=np.int64)
        instances = np.atleast_1d(np.asarray(instances, dtype=np.int64))
        if A.shape[1] != self.config.d or not len(ids) == len(A) == len(b) == len(instances):
            raise ContractViolation("row dimensions disagree with the sampler")
        if len(instances) and (instances.min() < 0 or instances.max() >= self.n_instances):
            raise ContractViolation("instance index out of range")
        pairs = set(zip(instances.tolist(), ids.tolist()))
        if len(pairs) != len(ids) or pairs & self._seen:
            raise ContractViolation("duplicate row id inserted")
        self._seen |= pairs
        cls = norm_class(A)
        live = cls != NO_CLASS
        if live.any() and (cls[live].min() < -CLASS_SHIFT or cls[live].max() >= N_CLASSES - CLASS_SHIFT):
            raise ContractViolation("row norm outside the supported range [2^-32, 2^32)")
        ids, A, b, instances, cls = ids[live], A[live], b[live], instances[live], cls[live]
        if not len(ids):
            return
        dep = self.substream_depth(ids, instances)
        rows = np.repeat(np.arange(len(ids)), dep)
        sub = np.arange(len(rows)) - np.repeat(np.cumsum(dep) - dep, dep)
        cells = instances[rows] * self.cpi + (cls[rows] + CLASS_SHIFT) * self.n_sub + sub
        self.cs1.insert(ids[rows], A[rows], b[rows], cells)
        self.cs2.insert(ids[rows], A[rows], b[rows], cells)

    def process_row(self, id_: int, a, b: float) -> None:
        """Insert one row into every instance."""
        inst = np.arange(self.n_instances)
        self.insert(np.full(self.n_instances, id_), np.tile(np.asarray(a, float), (self.n_instances, 1)),
                    np.full(self.n_instances, float(b)), inst)

    def insert_all(self, ids, A, b) -> None:
        """Insert a block of rows into every instance."""
        m = len(ids)
        inst = np.repeat(np.arange(self.n_instances), m)
        self.insert(np.tile(ids, self.n_instances), np.tile(A, (self.n_instances, 1)),
                    np.tile(b, self.n_instances), inst)

    def freeze(self) -> "SamplerBank":
        self.cs1.freeze()
        self.cs2.freeze()
        self.frozen = True
        return self

    # query
    def _reports(self, x, view):
        """Reported (cell, id) pairs with raw CS1 and CS2 contents.

        In candidate mode the report set does not depend on x, so the
        gathered contents are cached together with the x-free parts of the
        query, currently the CS2 row estimate.
        """
        cfg = self.config
        if cfg.id_mode == "candidates" and self._raw is not None:
            return self._raw
        if cfg.id_mode == "candidates":
            cells, ids = self.cs1.candidates()
        else:
            cells, ids = self.cs1.heavy(x, 0.0, self.cs1.n_buckets, view)[:2]
        raw1 = np.ascontiguousarray(self.cs1.signed_raw(ids, cells)[:, :, 0])
        raw2 = self.cs2.signed_raw(ids, cells)
        aug = lower_median(raw2[:, :, cfg.d], axis=1) if len(ids) else np.zeros((0, self.cs2.P))
        out = (cells, ids, raw1, raw2, aug)
        if cfg.id_mode == "candidates":
            self._raw = out
        return out

    def plan(self, x, measure: MeasureSpec | None = None, hessian: bool = False) -> QueryPlan:
        """Per-instance class masses, level sets and members at x (cached per x)."""
        if not self.frozen:
            raise ContractViolation("query before freeze()")
        x = np.asarray(x, dtype=float)
        measure = measure or _L2
        key = (x.tobytes(), measure, hessian)
        if self._plan_key == key:
            return self._plan
        cfg = self.config
        if cfg.order == 3 and not hessian:
            raise ContractViolation("order-3 sketches only answer Hessian queries")
        view = HessianView(cfg.d, cfg.order) if hessian else GradientView(cfg.d)
        cells, ids, raw1, raw2, aug = self._reports(x, view)
        m = len(ids)
        if not m:
            det_norm = np.zeros(0)
        elif hessian:
            det = self.cs1.contract(raw1, x, view)
            det_norm = np.sqrt(lower_median(np.einsum("ijk,ijk->ij", det, det), axis=1))
        else:
            det_norm = median_norms(raw1, np.append(x, -1.0), cfg.d)
        width = cfg.d * view.out_width
        cs2 = self.cs2
        if hessian:
            gnorm = det_norm

            def rebuild(rows):
                est = cs2.contract(raw2[rows], x, view)[0]
                return lower_median(est, axis=1).reshape(len(rows), width)
        else:
            r_hat = aug[:, : cfg.d] @ x - aug[:, cfg.d]
            gnorm = gradient_norm_from_estimates(measure, det_norm, aug[:, : cfg.d], r_hat)

            def rebuild(rows):
                est = cs2.contract(raw2[rows], x, view)[0]
                est = lower_median(est, axis=1).reshape(len(rows), width)
                return gradient_from_estimates(measure, est, aug[rows, : cfg.d], r_hat[rows])
        gnorm = np.where(det_norm > 0, gnorm, 0.0)
        inst = cells // self.cpi
        local = cells % self.cpi
        cls = local // self.n_sub
        sub = local % self.n_sub + 1
        group = inst * N_CLASSES + cls
        labels, guess, agg, lev, masses, status = guess_and_verify(
            gnorm, sub, group, self.boundary_shift[inst], self.alpha, cfg.n, self.n_levels, c_depth=cfg.c_depth
        )
        group = np.searchsorted(labels, group)
        self._plan_key = key
        self._plan = QueryPlan(self, ids, gnorm, group, labels, lev, guess, agg, masses, status, rebuild)
        return self._plan

    def rng(self, instance: int) -> np.random.Generator:
        if instance not in self._rngs:
            label = instance + self.instance_offset if instance >= 0 else instance
            self._rngs[instance] = np.random.default_rng(derive_seed(self.seed, "draw", label))
        return self._rngs[instance]

    def sample(self, x, instance: int = 0, measure=None, hessian=False, rng=None) -> SampleOutcome:
        """One draw from one instance."""
        plan = self.plan(x, measure, hessian).instance_view(instance)
        if plan.failed:
            raise EstimationFailure("no self-consistent guess for at least one norm class")
        if plan.total <= 0:
            return SampleOutcome.fail("zero_mass", self.instance_offset + instance)
        idx = int(plan.draw(rng or self.rng(instance), 1)[0])
        if idx < 0:
            return SampleOutcome.fail("dummy", self.instance_offset + instance)
        return SampleOutcome(True, int(plan.ids[idx]), plan.vectors[idx].copy(),
                             float(plan.norms[idx] / plan.total), self.instance_offset + instance)

    def draw_many(self, x, size: int, instances=None, measure=None, hessian=False, rng=None):
        """Vectorized boosted draws: try instances in order until each draw succeeds.

        Returns (ids, vectors, p_hat, instance used) with id -1 for draws that
        failed on every instance.
        """
        plan = self.plan(x, measure, hessian)
        instances = range(self.n_instances) if instances is None else instances
        rng = rng or self.rng(-1)
        ids = np.full(size, -1, dtype=np.int64)
        p_hat = np.zeros(size)
        used = np.full(size, -1, dtype=np.int64)
        vec = None
        todo = np.arange(size)
        for i in instances:
            if not len(todo):
                break
            ip = plan.instance_view(i)
            if ip.failed or ip.total <= 0:
                continue
            pick = ip.draw(rng, len(todo))
            hit = pick >= 0
            if vec is None:
                vec = np.zeros((size, ip.vectors.shape[1]))
            rows = todo[hit]
            ids[rows] = ip.ids[pick[hit]]
            vec[rows] = ip.vectors[pick[hit]]
            p_hat[rows] = ip.norms[pick[hit]] / ip.total
            used[rows] = i
            todo = todo[~hit]
        if vec is None:
            vec = np.zeros((size, self.config.d if not hessian else self.config.d ** 2))
        return ids, vec, p_hat, used


class GSampler:
    """A single sampler instance (one partition into norm classes)."""

    def __init__(self, config: SamplerConfig, seed: int = 0):
        self.bank = SamplerBank(config, seed, 1)

    @property
    def config(self) -> SamplerConfig:
        return self.bank.config

    def process_row(self, id_: int, a, b: float) -> "GSampler":
        self.bank.process_row(id_, a, b)
        return self

    def insert(self, ids, A, b) -> "GSampler":
        self.bank.insert(ids, A, b)
        return self

    def freeze(self) -> "GSampler":
        self.bank.freeze()
        return self

    def plan(self, x, measure=None, hessian=False) -> QueryPlan:
        return self.bank.plan(x, measure, hessian)

    def sample_once(self, x, measure=None, rng=None) -> SampleOutcome:
        return self.bank.sample(x, 0, measure, rng=rng)


def boost_count(delta: float, c_r: float = 4.0) -> int:
    """ceil(C_R log2(1/delta)) instances, at least one."""
    if not 0 < delta <= 1:
        raise ContractViolation("delta must lie in (0, 1]")
    return max(1, int(math.ceil(c_r * math.log2(1.0 / delta))))


class BoostedSampler:
    """R independent instances tried in order; fails only when all of them fail."""

    def __init__(self, config: SamplerConfig, seed: int = 0, delta: float = 0.5, c_r: float = 4.0):
        self.delta = delta
        self.n_tries = boost_count(delta, c_r)
        self.bank = SamplerBank(config, seed, self.n_tries)
        self.usage = 0

    @property
    def config(self) -> SamplerConfig:
        return self.bank.config

    def process_row(self, id_: int, a, b: float) -> "BoostedSampler":
        self.bank.process_row(id_, a, b)
        return self

    def insert(self, ids, A, b) -> "BoostedSampler":
        self.bank.insert_all(np.asarray(ids), np.atleast_2d(A), np.atleast_1d(b))
        return self

    def freeze(self) -> "BoostedSampler":
        self.bank.freeze()
        return self

    def plan(self, x, measure=None, hessian=False) -> QueryPlan:
        return self.bank.plan(x, measure, hessian)

    def sample(self, x, measure=None, hessian=False, rng=None) -> SampleOutcome:
        self.usage += 1
        zero = 0
        for r in range(self.n_tries):
            try:
                out = self.bank.sample(x, r, measure, hessian, rng)
            except EstimationFailure:
                continue
            if out.ok:
                return out
            zero += out.reason == "zero_mass"
        if zero == self.n_tries:
            return SampleOutcome.fail("zero_mass")
        return SampleOutcome.fail("exhausted", exhausted=True)

    def draw_many(self, x, size: int, measure=None, hessian=False, rng=None):
        return self.bank.draw_many(x, size, None, measure, hessian, rng)


def process_row(partition, row) -> object:
    """Feed a ``(id, a, b)`` row to a sampler."""
    id_, a, b = row
    return partition.process_row(id_, a, b)


def sample_once(partition, x, measure=None) -> SampleOutcome:
    if isinstance(partition, BoostedSampler):
        return partition.bank.sample(x, 0, measure)
    return partition.sample_once(x, measure)


def sample_boosted(partition: BoostedSampler, x, measure=None, delta: float | None = None) -> SampleOutcome:
    if delta is not None and boost_count(delta) > partition.n_tries:
        raise ContractViolation(f"delta={delta} needs {boost_count(delta)} instances, sampler has {partition.n_tries}")
    return partition.sample(x, measure)
