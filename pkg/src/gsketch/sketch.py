"""Generalized CountSketch over matrix rows.

Rows are stored as signed sums of a *payload* built from ``(a_i, b_i)`` and
contracted with the query vector ``x`` only after the stream ends.  For first
order the payload is ``[a, b]`` and a bucket holds ``[M | c]`` with
``M = sum sigma_i a_i a_i^T`` and ``c = sum sigma_i b_i a_i``, so that
``M x - c`` is the signed sum of ``(<a_i, x> - b_i) a_i``.  Order three adds one
tensor factor for the Hessian path.

Tables are *banked*: one object holds many independent cells (sampler
instances, norm classes, substreams) in a single sparse store keyed by
``(cell, repetition, channel, slot, bucket)``.  A standalone table is a bank
with a single cell.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._backend import SparseAccumulator
from .errors import ContractViolation
from .hashing import PolyHash, derive_seed

ID_LIMIT = 1 << 32
_HASH_PREFIX_LIMIT = 1 << 29


def default_buckets(eps: float, c_b: float = 8.0) -> int:
    """ceil(C_b / eps^2) buckets per repetition."""
    return int(math.ceil(c_b / eps**2))


def default_reps(n: int, T: int = 1, c_rep: float = 3.0) -> int:
    """ceil(C_rep * log2(nT)) repetitions, bumped to the next odd number."""
    reps = max(1, int(math.ceil(c_rep * math.log2(max(2, n * max(T, 1))))))
    return reps if reps % 2 else reps + 1


def lower_median(values: np.ndarray, axis: int) -> np.ndarray:
    """Median along ``axis``; the lower of the two middle values for even counts."""
    k = (values.shape[axis] - 1) // 2
    return np.take(np.partition(values, k, axis=axis), k, axis=axis)


def payload_width(d: int, order: int) -> int:
    if order == 2:
        return d + 1
    if order == 3:
        return d * d + d
    raise ContractViolation(f"tensor order must be 2 or 3, got {order}")


def payload(A: np.ndarray, b: np.ndarray, order: int) -> np.ndarray:
    """Per-row payload [a^(p-1), b * a^(p-2)] flattened, shape (m, P)."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if order == 2:
        return np.concatenate([A, b[:, None]], axis=1)
    if order == 3:
        outer = (A[:, :, None] * A[:, None, :]).reshape(len(A), -1)
        return np.concatenate([outer, b[:, None] * A], axis=1)
    raise ContractViolation(f"tensor order must be 2 or 3, got {order}")


class GradientView:
    """Contract an order-2 payload sum into a residual-weighted scalar."""

    out_width = 1

    def __init__(self, d: int):
        self.d = d

    def apply(self, psi: np.ndarray, x: np.ndarray) -> np.ndarray:
        ext = np.append(x, -1.0)
        flat = np.reshape(psi, (-1, self.d + 1)) @ ext
        return flat.reshape(psi.shape[:-1] + (1,))


class HessianView:
    """Contract a payload sum into one row of ``w(r) a a^T`` with ``w(r) = r^(p-2)``."""

    def __init__(self, d: int, order: int):
        self.d = d
        self.order = order
        self.out_width = d

    def apply(self, psi: np.ndarray, x: np.ndarray) -> np.ndarray:
        d = self.d
        if self.order == 2:
            return psi[..., :d]
        mat = psi[..., : d * d].reshape(psi.shape[:-1] + (d, d))
        return mat @ x - psi[..., d * d :]


@dataclass(frozen=True)
class TableShape:
    d: int
    order: int
    n_buckets: int
    reps: int
    seed: int


class _Bank:
    channels = 1
    slots = 1
    tag = "table"

    def __init__(
        self,
        d: int,
        n_buckets: int,
        reps: int = 1,
        seed: int = 0,
        order: int = 2,
        n_cells: int = 1,
        cells_per_instance: int = 1,
        instance_offset: int = 0,
        check_ids: bool = True,
    ):
        if n_buckets < 1 or reps < 1 or d < 1:
            raise ContractViolation("d, n_buckets and reps must be positive")
        if n_cells % cells_per_instance:
            raise ContractViolation("n_cells must be a multiple of cells_per_instance")
        self.shape = TableShape(int(d), int(order), int(n_buckets), int(reps), int(seed))
        self.P = payload_width(d, order)
        self.n_cells = int(n_cells)
        self.cells_per_instance = int(cells_per_instance)
        self.instance_offset = int(instance_offset)
        if self.cells_per_instance * self.reps * self.channels >= _HASH_PREFIX_LIMIT:
            raise ContractViolation("too many cells per instance for the hash input encoding")
        if self.n_cells * self.reps * self.channels * self.slots * self.n_buckets >= 1 << 62:
            raise ContractViolation("bank too large for 64-bit bucket keys")
        n_inst = self.n_cells // self.cells_per_instance
        # repetitions and cells share coefficients and differ only in the hash input, so a
        # pairwise hash would repeat one collision pattern in all of them; 4-wise keeps
        # the collision events of distinct repetitions independent
        self._h = PolyHash(derive_seed(seed, self.tag, "h"), 4, n_inst, instance_offset)
        self._s = PolyHash(derive_seed(seed, self.tag, "sigma"), 4, n_inst, instance_offset)
        self.store = SparseAccumulator(self.width, 64)
        self.frozen = False
        self.rows_seen = 0
        self._check_ids = check_ids
        self._seen: set[tuple[int, int]] = set()
        self._entries = None
        self._decoded = None

    # shape shortcuts
    @property
    def d(self) -> int:
        return self.shape.d

    @property
    def order(self) -> int:
        return self.shape.order

    @property
    def n_buckets(self) -> int:
        return self.shape.n_buckets

    @property
    def reps(self) -> int:
        return self.shape.reps

    @property
    def seed(self) -> int:
        return self.shape.seed

    @property
    def width(self) -> int:
        raise NotImplementedError

    def _hash_parts(self, cells, ids, rep, ch):
        cells = np.asarray(cells, dtype=np.int64)
        ids = np.asarray(ids, dtype=np.int64)
        inst = cells // self.cells_per_instance
        local = cells % self.cells_per_instance
        prefix = (local * self.reps + rep) * self.channels + ch
        xs = (prefix.astype(np.uint64) << np.uint64(32)) | ids.astype(np.uint64)
        return inst, xs

    def bucket_sign(self, cells, ids, rep, ch=0):
        inst, xs = self._hash_parts(cells, ids, rep, ch)
        return self._h.buckets(xs, self.n_buckets, inst), self._s.signs(xs, inst)

    def _key(self, cells, rep, ch, slot, bucket):
        cells = np.asarray(cells, dtype=np.int64)
        return (((cells * self.reps + rep) * self.channels + ch) * self.slots + slot) * self.n_buckets + bucket

    def _decode_key(self, keys):
        keys = np.asarray(keys, dtype=np.int64)
        bucket = keys % self.n_buckets
        rest = keys // self.n_buckets
        slot = rest % self.slots
        rest //= self.slots
        ch = rest % self.channels
        rest //= self.channels
        return rest // self.reps, rest % self.reps, ch, slot, bucket

    def _validate_rows(self, cells, ids, A, b):
        if self.frozen:
            raise ContractViolation("table is frozen; no further rows may be inserted")
        A = np.atleast_2d(np.asarray(A, dtype=float))
        ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
        b = np.atleast_1d(np.asarray(b, dtype=float))
        if A.shape[1] != self.d or len(ids) != len(A) or len(b) != len(A):
            raise ContractViolation("row dimensions disagree with the table")
        if len(ids) and (ids.min() < 0 or ids.max() >= ID_LIMIT):
            raise ContractViolation("row ids must lie in [0, 2^32)")
        cells = np.zeros(len(ids), dtype=np.int64) if cells is None else np.atleast_1d(np.asarray(cells, dtype=np.int64))
        if len(cells) != len(ids) or (len(cells) and (cells.min() < 0 or cells.max() >= self.n_cells)):
            raise ContractViolation("cell index out of range")
        if self._check_ids:
            pairs = list(zip(cells.tolist(), ids.tolist()))
            fresh = set(pairs)
            if len(fresh) != len(pairs) or fresh & self._seen:
                raise ContractViolation("duplicate row id inserted")
            self._seen |= fresh
        return cells, ids, A, b

    def insert(self, ids, A, b, cells=None) -> None:
        """Add rows (one per id) to the given cells."""
        cells, ids, A, b = self._validate_rows(cells, ids, A, b)
        if len(ids) == 0:
            return
        step = max(1, (1 << 20) // max(1, self.reps * self.channels * self.slots * self.width))
        for lo in range(0, len(ids), step):
            sl = slice(lo, lo + step)
            self._insert_chunk(cells[sl], ids[sl], A[sl], b[sl])
        self.rows_seen += len(ids)

    def _insert_chunk(self, cells, ids, A, b):
        raise NotImplementedError

    def freeze(self):
        self.frozen = True
        return self

    def _require_frozen(self):
        if not self.frozen:
            raise ContractViolation("query before freeze()")

    def compatible(self, other: "_Bank") -> bool:
        return (
            type(self) is type(other)
            and self.shape == other.shape
            and self.n_cells == other.n_cells
            and self.cells_per_instance == other.cells_per_instance
            and self.instance_offset == other.instance_offset
        )

    def merge(self, other: "_Bank"):
        """Add another bank built with the same hashes into this one."""
        if not self.compatible(other):
            raise ContractViolation("tables differ in shape or hash seed")
        if self.frozen:
            raise ContractViolation("cannot merge into a frozen table")
        keys, vals = other.store.export()
        self.store.add(keys, vals)
        self.rows_seen += other.rows_seen
        self._seen |= other._seen
        return self

    def entries(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.frozen:
            return self.store.export()
        if self._entries is None:
            self._entries = self.store.export()
        return self._entries

    def hash_grid(self, cells, ids):
        """Slot-0 store keys and signs of (cell, id) pairs for every (rep, channel): shapes (m, reps, channels)."""
        ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
        cells = np.zeros(len(ids), np.int64) if cells is None else np.atleast_1d(np.asarray(cells, dtype=np.int64))
        R, C = self.reps, self.channels
        shape = (len(ids), R, C)
        inst = cells // self.cells_per_instance
        local = cells % self.cells_per_instance
        grid = np.arange(R)[:, None] * C + np.arange(C)[None, :]
        prefix = local[:, None, None] * (R * C) + grid[None]
        xs = (prefix.astype(np.uint64) << np.uint64(32)) | ids.astype(np.uint64)[:, None, None]
        rows = np.repeat(inst, R * C)
        bucket = self._h.buckets(xs.ravel(), self.n_buckets, rows).reshape(shape)
        signs = self._s.signs(xs.ravel(), rows).reshape(shape)
        keys = ((cells[:, None, None] * (R * C) + grid[None]) * self.slots) * self.n_buckets + bucket
        return keys, signs

    def lookup_keys(self, cells, ids):
        """Store keys and signs of (cell, id) pairs: shapes (m, reps, channels)."""
        return self.hash_grid(cells, ids)

    def signed_raw(self, ids, cells=None) -> np.ndarray:
        """Sign-corrected bucket contents per (row, repetition, channel), before contraction."""
        self._require_frozen()
        keys, signs = self.lookup_keys(cells, ids)
        raw = self.store.lookup(keys.ravel()).reshape(keys.shape + (self.width,))
        return raw * signs[..., None]

    def nbytes(self) -> int:
        return len(self.store) * (8 * self.width + 8)

    def to_bytes(self) -> bytes:
        from .io import pack_table

        return pack_table(self)


class BucketTable(_Bank):
    """Signed bucket sums of ``a (x) payload`` with optional dyadic id recovery.

    ``id_bits > 0`` keeps one extra sub-table per id bit (see ``IdRecovery``);
    ``keep_candidates`` records inserted ids per cell instead.
    """

    tag = "cs1"

    def __init__(self, d, n_buckets, reps=1, seed=0, order=2, id_bits=0, keep_candidates=False, **kw):
        self.id_bits = int(id_bits)
        self.slots = 1 + self.id_bits
        super().__init__(d, n_buckets, reps, seed, order, **kw)
        self.keep_candidates = bool(keep_candidates)
        self._cand: list[tuple[np.ndarray, np.ndarray]] = []
        self._cand_cache = None
        self._counts = None

    @property
    def width(self) -> int:
        return self.d * self.P

    def _insert_chunk(self, cells, ids, A, b):
        m = len(ids)
        vals = (A[:, :, None] * payload(A, b, self.order)[:, None, :]).reshape(m, -1)
        keys, signs = self.hash_grid(cells, ids)
        keys, signs = keys[:, :, 0], signs[:, :, 0]
        signed = vals[:, None, :] * signs[:, :, None]
        keys_all, vals_all = [keys.ravel()], [signed.reshape(-1, self.width)]
        for t in range(self.id_bits):
            on = ((ids >> t) & 1).astype(bool)
            keys_all.append((keys[on] + (1 + t) * self.n_buckets).ravel())
            vals_all.append(signed[on].reshape(-1, self.width))
        self.store.add(np.concatenate(keys_all), np.concatenate(vals_all))
        if self.keep_candidates:
            self._cand.append((cells.copy(), ids.copy()))
            self._cand_cache = self._counts = None

    def merge(self, other):
        super().merge(other)
        self._cand.extend(other._cand)
        self._cand_cache = self._counts = None
        return self

    def matrices(self, cell: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Dense (M, c) of one cell: shapes (reps, B, d, d^(p-1)) and (reps, B, ...)."""
        if self.order != 2:
            raise ContractViolation("dense (M, c) view is defined for order 2")
        keys, vals = self.entries()
        cell_k, rep, _, slot, bucket = self._decode_key(keys)
        keep = (cell_k == cell) & (slot == 0)
        full = np.zeros((self.reps, self.n_buckets, self.d, self.P))
        full[rep[keep], bucket[keep]] = vals[keep].reshape(-1, self.d, self.P)
        return full[..., : self.d], full[..., self.d]

    def candidates(self) -> tuple[np.ndarray, np.ndarray]:
        """Recorded (cell, id) pairs, unique and sorted."""
        if self._cand_cache is None:
            if self._cand:
                cells = np.concatenate([c for c, _ in self._cand])
                ids = np.concatenate([i for _, i in self._cand])
                pairs = np.unique(np.stack([cells, ids], axis=1), axis=0)
                self._cand_cache = (pairs[:, 0].copy(), pairs[:, 1].copy())
            else:
                self._cand_cache = (np.zeros(0, np.int64), np.zeros(0, np.int64))
        return self._cand_cache

    def _bucket_counts(self, keys) -> np.ndarray:
        if self._counts is None:
            cells, ids = self.candidates()
            self._counts = np.unique(self.hash_grid(cells, ids)[0], return_counts=True)
        occupied, counts = self._counts
        pos = np.searchsorted(occupied, keys)
        return counts[np.minimum(pos, len(occupied) - 1)]

    def rep_estimates(self, x, ids, cells=None, view=None) -> np.ndarray:
        """Per-repetition estimates sigma * (bucket contracted at x), shape (m, reps, d*Q)."""
        raw = self.signed_raw(ids, cells)[:, :, 0]
        return self.contract(raw, x, view)

    def contract(self, raw, x, view=None) -> np.ndarray:
        """Apply a view to gathered (m, reps, d*P) contents, giving (m, reps, d*Q)."""
        view = view or GradientView(self.d)
        m = raw.shape[0]
        est = view.apply(raw.reshape(m, self.reps, self.d, self.P), np.asarray(x, dtype=float))
        return est.reshape(m, self.reps, self.d * view.out_width)

    def estimates(self, x, ids, cells=None, view=None) -> tuple[np.ndarray, np.ndarray]:
        """Coordinate-wise median estimate and median norm per (cell, id)."""
        per_rep = self.rep_estimates(x, ids, cells, view)
        return lower_median(per_rep, axis=1), lower_median(np.linalg.norm(per_rep, axis=2), axis=1)

    def bucket_values(self, x, view=None, slot: int = 0, cells=None):
        """Nonzero buckets of one slot contracted at x: (cell, rep, bucket, values).

        ``cells`` restricts the result to those cells.
        """
        self._require_frozen()
        view = view or GradientView(self.d)
        if self._decoded is None:
            keys, vals = self.entries()
            cell, rep, _, sl, bucket = self._decode_key(keys)
            self._decoded = (cell, rep, sl, bucket, vals)
        cell, rep, sl, bucket, vals = self._decoded
        keep = sl == slot
        if cells is not None:
            keep &= np.isin(cell, cells)
        raw = vals[keep].reshape(-1, self.d, self.P)
        out = view.apply(raw, np.asarray(x, dtype=float)).reshape(len(raw), -1)
        return cell[keep], rep[keep], bucket[keep], out

    def tail_mass(self, x, t: int, view=None, cells=None) -> np.ndarray:
        """Per-cell estimate of the summed row norms outside the t largest rows.

        Per repetition, bucket masses are summed after dropping the t largest;
        the median over repetitions is returned. A bucket's mass is its norm
        scaled by the square root of its row count when candidates are kept:
        the squared norm estimates the rows' squared norms without bias, and
        sqrt(count) times that root bounds their sum, tightly for equal rows.
        Without candidates the plain norm is used, which can undercount.
        Cells outside ``cells``, when given, are left at zero.
        """
        cell, rep, bucket, vals = self.bucket_values(x, view, cells=cells)
        norms = np.linalg.norm(vals, axis=1)
        if self.keep_candidates and len(norms):
            norms = norms * np.sqrt(self._bucket_counts(self._key(cell, rep, 0, 0, bucket)))
        out = np.zeros((self.n_cells, self.reps))
        group = cell * self.reps + rep
        order = np.lexsort((-norms, group))
        g_sorted, n_sorted = group[order], norms[order]
        starts = np.searchsorted(g_sorted, g_sorted, side="left")
        keep = np.arange(len(order)) - starts >= t
        np.add.at(out.reshape(-1), g_sorted[keep], n_sorted[keep])
        return lower_median(out, axis=1)

    def heavy(self, x, thr: float, t: int, view=None, cells_subset=None):
        """Ids whose median norm is at least ``thr`` times their cell's tail estimate.

        Returns (cells, ids, vectors, norms) over the reported rows.
        """
        self._require_frozen()
        if self.keep_candidates:
            cells, ids = self.candidates()
        elif self.id_bits:
            cells, ids = IdRecovery(self).decode(x, view)
        else:
            raise ContractViolation("table keeps neither candidates nor id sub-tables")
        if cells_subset is not None:
            keep = np.isin(cells, cells_subset)
            cells, ids = cells[keep], ids[keep]
        vec, norm = self.estimates(x, ids, cells, view)
        tail = self.tail_mass(x, t, view, cells_subset)
        hit = (norm > 0) & (norm >= thr * tail[cells])
        return cells[hit], ids[hit], vec[hit], norm[hit]

    def query_heavy(self, x, eps: float, cell: int = 0, view=None) -> dict[int, np.ndarray]:
        """Rows heavy against the tail beyond the 2/eps^2 largest.

        The cut sits at 3/4 of eps times the tail estimate, between the
        must-report level eps and the must-not-report level eps/2.
        """
        if not 0 < eps <= 1:
            raise ContractViolation("eps must lie in (0, 1]")
        t = int(math.ceil(2 / eps**2))
        cells, ids, vec, _ = self.heavy(x, 0.75 * eps, t, view, cells_subset=[cell])
        return {int(i): v for i, v in zip(ids, vec)}


class IdRecovery:
    """Bitwise id decoding from the per-bit sub-tables of a ``BucketTable``.

    Sub-table t of a bucket holds the part of its sum contributed by ids with
    bit t set.  When one row carries at least 3/4 of a bucket's squared mass,
    every bit is read off by comparing the sub-table mass with the remainder.
    """

    dominance = 0.75

    def __init__(self, table: BucketTable):
        if table.id_bits < 1:
            raise ContractViolation("table was built without id sub-tables")
        self.table = table

    def decode(self, x, view=None) -> tuple[np.ndarray, np.ndarray]:
        tab = self.table
        cell, rep, bucket, val = tab.bucket_values(x, view)
        total = np.einsum("ij,ij->i", val, val)
        live = total > 0
        cell, rep, bucket, val, total = cell[live], rep[live], bucket[live], val[live], total[live]
        ids = np.zeros(len(cell), dtype=np.int64)
        ok = np.ones(len(cell), dtype=bool)
        view = view or GradientView(tab.d)
        for t in range(tab.id_bits):
            keys = tab._key(cell, rep, 0, 1 + t, bucket)
            raw = tab.store.lookup(keys).reshape(-1, tab.d, tab.P)
            sub = view.apply(raw, np.asarray(x, dtype=float)).reshape(len(cell), -1)
            on = np.einsum("ij,ij->i", sub, sub)
            rest = val - sub
            off = np.einsum("ij,ij->i", rest, rest)
            one = on >= self.dominance * total
            zero = off >= self.dominance * total
            ok &= one | zero
            ids |= one.astype(np.int64) << t
        cell, rep, bucket, ids = cell[ok], rep[ok], bucket[ok], ids[ok]
        # a decoded id must hash back to the bucket it came from
        verified = np.zeros(len(ids), dtype=bool)
        for r in range(tab.reps):
            sel = rep == r
            if sel.any():
                b, _ = tab.bucket_sign(cell[sel], ids[sel], r)
                verified[sel] = b == bucket[sel]
        pairs = np.stack([cell[verified], ids[verified]], axis=1)
        if len(pairs) == 0:
            return np.zeros(0, np.int64), np.zeros(0, np.int64)
        pairs = np.unique(pairs, axis=0)
        return pairs[:, 0].copy(), pairs[:, 1].copy()


class CoordinateMedianSketch(_Bank):
    """Per-coordinate signed tables whose median gives unbiased row estimates.

    Channel k < d stores ``a_k * payload`` under its own hash per repetition;
    the extra channel k = d stores the bare payload, which yields estimates
    of ``a`` and ``b`` themselves.
    """

    tag = "cs2"

    def __init__(self, d, n_buckets, reps=1, seed=0, order=2, **kw):
        self.channels = d + 1
        super().__init__(d, n_buckets, reps, seed, order, **kw)

    @property
    def width(self) -> int:
        return self.P

    def _insert_chunk(self, cells, ids, A, b):
        psi = payload(A, b, self.order)
        weights = np.concatenate([A, np.ones((len(A), 1))], axis=1)
        keys, signs = self.hash_grid(cells, ids)
        vals = psi[:, None, None, :] * (signs * weights[:, None, :])[..., None]
        self.store.add(keys.ravel(), vals.reshape(-1, self.P))

    def rep_estimates(self, x, ids, cells=None, view=None):
        """Per-repetition signed estimates: (m, reps, d, Q) contracted rows and (m, reps, P) payloads."""
        return self.contract(self.signed_raw(ids, cells), x, view)

    def contract(self, raw, x, view=None):
        view = view or GradientView(self.d)
        return view.apply(raw, np.asarray(x, dtype=float))[:, :, : self.d], raw[:, :, self.d]

    def estimates(self, x, ids, cells=None, view=None) -> tuple[np.ndarray, np.ndarray]:
        """Median estimates: (m, d*Q) contracted rows and (m, P) payloads."""
        rows, bare = self.rep_estimates(x, ids, cells, view)
        est = lower_median(rows, axis=1).reshape(len(rows), -1)
        return est, lower_median(bare, axis=1)

    def query_estimate(self, id_: int, x, cell: int = 0) -> np.ndarray:
        """Unbiased estimate of ``(<a_id, x> - b_id) a_id``."""
        est, _ = self.estimates(x, [id_], [cell])
        return est[0]

