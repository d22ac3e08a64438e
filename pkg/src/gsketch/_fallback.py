"""Pure numpy versions of the compiled kernels (same signatures, same results)."""
from __future__ import annotations

import numpy as np

_P = np.uint64((1 << 61) - 1)
_LO32 = np.uint64(0xFFFFFFFF)
_LO29 = np.uint64((1 << 29) - 1)
_S3 = np.uint64(3)
_S29 = np.uint64(29)
_S32 = np.uint64(32)
_S61 = np.uint64(61)


def _fold(r: np.ndarray) -> np.ndarray:
    return (r & _P) + (r >> _S61)


def mulmod61(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a*b mod 2^61-1 for uint64 arrays with entries below the modulus."""
    a0, a1 = a & _LO32, a >> _S32
    b0, b1 = b & _LO32, b >> _S32
    lo = a0 * b0
    mid = a1 * b0 + a0 * b1
    hi = a1 * b1
    # 2^64 = 8 and 2^61 = 1 modulo the prime
    r = _fold(lo)
    r = r + ((mid & _LO29) << _S32) + (mid >> _S29)
    r = r + (hi << _S3)
    r = _fold(_fold(r))
    return np.where(r >= _P, r - _P, r)


def poly_hash(coeffs: np.ndarray, rows: np.ndarray, xs: np.ndarray) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.uint64) % _P
    c = coeffs[rows]
    h = c[:, -1].copy()
    for j in range(c.shape[1] - 2, -1, -1):
        h = mulmod61(h, xs) + c[:, j]
        h = np.where(h >= _P, h - _P, h)
    return h


class SparseAccumulator:
    """Sorted-array map from int64 keys to accumulated float64 rows.

    Additions are buffered and folded in with unbuffered adds, so each key's
    contributions are summed in arrival order, as in the compiled map.
    """

    def __init__(self, width: int, capacity: int = 64):
        self.width = int(width)
        self._keys = np.empty(0, dtype=np.int64)
        self._vals = np.zeros((0, self.width))
        self._pending_k: list[np.ndarray] = []
        self._pending_v: list[np.ndarray] = []
        self._pending_n = 0

    def __len__(self) -> int:
        self._flush()
        return len(self._keys)

    def add(self, keys: np.ndarray, vals: np.ndarray) -> None:
        keys = np.ascontiguousarray(keys, dtype=np.int64)
        vals = np.ascontiguousarray(vals, dtype=np.float64)
        if vals.shape != (len(keys), self.width):
            raise ValueError("keys and vals disagree in shape")
        self._pending_k.append(keys)
        self._pending_v.append(vals)
        self._pending_n += len(keys)
        if self._pending_n > 1 << 18:
            self._flush()

    def _flush(self) -> None:
        if not self._pending_k:
            return
        keys = np.concatenate([self._keys, *self._pending_k])
        vals = np.concatenate([self._vals, *self._pending_v])
        self._pending_k, self._pending_v, self._pending_n = [], [], 0
        uniq, slot = np.unique(keys, return_inverse=True)
        # unbuffered adds run in index order, so each key sums its rows left to right from zero
        out = np.zeros((len(uniq), self.width))
        np.add.at(out, slot.ravel(), vals)
        self._keys, self._vals = uniq, out

    def lookup(self, keys: np.ndarray) -> np.ndarray:
        self._flush()
        keys = np.asarray(keys, dtype=np.int64)
        out = np.zeros((len(keys), self.width))
        if len(self._keys) == 0:
            return out
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, len(self._keys) - 1)
        hit = self._keys[pos] == keys
        out[hit] = self._vals[pos[hit]]
        return out

    def export(self) -> tuple[np.ndarray, np.ndarray]:
        self._flush()
        return self._keys.copy(), self._vals.copy()


def median_norms(raw: np.ndarray, ext: np.ndarray, d: int) -> np.ndarray:
    m, R = raw.shape[:2]
    det = (raw.reshape(m * R * d, len(ext)) @ ext).reshape(m, R, d)
    sq = np.einsum("ijk,ijk->ij", det, det)
    return np.sqrt(np.take(np.partition(sq, (R - 1) // 2, axis=1), (R - 1) // 2, axis=1))


def verify_guesses(norms, sub, order, starts, shift, k_hi, k_lo, alpha, depth_tab, grow, pad, level_count, block=2):
    """Descending guesses evaluated ``block`` at a time for all pending groups."""
    from .levels import level_cells

    G = len(shift)
    group = np.repeat(np.arange(G), np.diff(starts))
    rows_by_group = order
    norms_s = norms[rows_by_group]
    sub_s = sub[rows_by_group]
    pos = norms_s > 0
    guess = np.zeros(G)
    agg = np.zeros(G)
    status = np.where(k_hi >= k_lo, -1, 0).astype(np.int64)
    lev_s = np.full(len(norms), -1, dtype=np.int64)
    masses = np.zeros((G, level_count))
    pending = k_hi >= k_lo
    offs = np.arange(block)
    step = 0
    while pending.any():
        pg = np.flatnonzero(pending)
        kk = (k_hi[pg] - step)[:, None] - offs[None, :]
        valid = kk >= k_lo[pg][:, None]
        cur = np.ldexp(1.0, kk).ravel()
        slot = np.full(G, -1, dtype=np.int64)
        slot[pg] = np.arange(len(pg))
        rows = np.flatnonzero(pending[group] & pos)
        rep_group = (slot[group[rows]][:, None] * block + offs[None, :]).ravel()
        rep_rows = np.repeat(rows, block)
        sub_lev, cells, cell_mass = level_cells(
            norms_s[rep_rows], sub_s[rep_rows], rep_group, np.repeat(shift[pg], block), cur, alpha,
            depth_tab, level_count,
        )
        total = np.bincount(cells // level_count, weights=cell_mass, minlength=len(cur)).astype(float)
        ok = ((total >= cur / 2) & (total <= 2 * cur)).reshape(len(pg), block) & valid
        found = ok.any(axis=1)
        first = np.argmax(ok, axis=1)
        win = pg[found]
        pick = np.flatnonzero(found) * block + first[found]
        guess[win] = cur[pick]
        agg[win] = total[pick]
        status[win] = 1
        where = np.full(len(cur), -1, dtype=np.int64)
        where[pick] = win
        dest = where[cells // level_count]
        keep = dest >= 0
        masses[dest[keep], cells[keep] % level_count] = cell_mass[keep]
        chosen = np.zeros(len(cur), dtype=bool)
        chosen[pick] = True
        hit = chosen[rep_group]
        lev_s[rep_rows[hit]] = sub_lev[hit]
        pending[win] = False
        step += block
        pending &= k_hi - step >= k_lo
    lev = np.full(len(norms), -1, dtype=np.int64)
    lev[rows_by_group] = lev_s
    return guess, agg, lev, masses, status
