# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: hashing, the sparse bucket accumulator and the query-time hot loops."""
import numpy as np

cimport numpy as cnp
from libc.math cimport floor, ldexp, log, log1p, sqrt
from libc.stdint cimport int64_t, uint64_t

cnp.import_array()

cdef extern from *:
    """
    typedef unsigned __int128 gs_u128;
    static inline unsigned long long gs_mulmod61(unsigned long long a, unsigned long long b) {
        const unsigned long long P = 0x1FFFFFFFFFFFFFFFULL;
        gs_u128 prod = (gs_u128)a * b;
        unsigned long long r = (unsigned long long)(prod & P) + (unsigned long long)(prod >> 61);
        r = (r & P) + (r >> 61);
        return r >= P ? r - P : r;
    }
    """
    unsigned long long gs_mulmod61(unsigned long long a, unsigned long long b) nogil

cdef uint64_t MERSENNE61 = 0x1FFFFFFFFFFFFFFFULL


def poly_hash(cnp.uint64_t[:, ::1] coeffs, cnp.int64_t[::1] rows, cnp.uint64_t[::1] xs):
    """Evaluate sum_j coeffs[rows[i], j] * xs[i]**j mod 2^61-1 for every i."""
    cdef Py_ssize_t m = xs.shape[0]
    cdef Py_ssize_t k = coeffs.shape[1]
    cdef Py_ssize_t i, j
    cdef uint64_t h, x
    cdef int64_t r
    out = np.empty(m, dtype=np.uint64)
    cdef cnp.uint64_t[::1] o = out
    with nogil:
        for i in range(m):
            r = rows[i]
            x = xs[i] % MERSENNE61
            h = coeffs[r, k - 1]
            for j in range(k - 2, -1, -1):
                h = gs_mulmod61(h, x) + coeffs[r, j]
                if h >= MERSENNE61:
                    h -= MERSENNE61
            o[i] = h
    return out


cdef inline uint64_t _mix(uint64_t z) nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef class SparseAccumulator:
    """Open-addressing map from int64 bucket keys to accumulated float64 rows."""

    cdef public Py_ssize_t width
    cdef Py_ssize_t n_entries
    cdef Py_ssize_t mask
    cdef object _slot_keys
    cdef object _slot_ref
    cdef object _keys
    cdef object _vals

    def __init__(self, Py_ssize_t width, Py_ssize_t capacity=64):
        cdef Py_ssize_t slots = 16
        while slots < 2 * capacity:
            slots *= 2
        self.width = width
        self.n_entries = 0
        self.mask = slots - 1
        # a slot is empty while its entry reference is -1, so every int64 key is usable
        self._slot_keys = np.zeros(slots, dtype=np.int64)
        self._slot_ref = np.full(slots, -1, dtype=np.int64)
        self._keys = np.empty(max(capacity, 8), dtype=np.int64)
        self._vals = np.zeros((max(capacity, 8), width), dtype=np.float64)

    def __len__(self):
        return self.n_entries

    cdef void _grow_slots(self):
        cdef cnp.int64_t[::1] keys = self._keys
        cdef Py_ssize_t slots = (self.mask + 1) * 2
        new_slot_keys = np.zeros(slots, dtype=np.int64)
        new_slot_ref = np.full(slots, -1, dtype=np.int64)
        cdef cnp.int64_t[::1] sk = new_slot_keys
        cdef cnp.int64_t[::1] sr = new_slot_ref
        cdef Py_ssize_t mask = slots - 1
        cdef Py_ssize_t e, s
        for e in range(self.n_entries):
            s = <Py_ssize_t>(_mix(<uint64_t>keys[e]) & mask)
            while sr[s] != -1:
                s = (s + 1) & mask
            sk[s] = keys[e]
            sr[s] = e
        self._slot_keys = new_slot_keys
        self._slot_ref = new_slot_ref
        self.mask = mask

    cdef void _grow_entries(self, Py_ssize_t need):
        cdef Py_ssize_t cap = self._keys.shape[0]
        while cap < need:
            cap *= 2
        keys = np.empty(cap, dtype=np.int64)
        vals = np.zeros((cap, self.width), dtype=np.float64)
        keys[: self.n_entries] = self._keys[: self.n_entries]
        vals[: self.n_entries] = self._vals[: self.n_entries]
        self._keys = keys
        self._vals = vals

    def add(self, cnp.int64_t[::1] keys, cnp.float64_t[:, ::1] vals):
        """Accumulate vals[i] into the entry for keys[i], in order."""
        cdef Py_ssize_t m = keys.shape[0]
        cdef Py_ssize_t w = self.width
        if vals.shape[0] != m or vals.shape[1] != w:
            raise ValueError("keys and vals disagree in shape")
        if self._keys.shape[0] < self.n_entries + m:
            self._grow_entries(self.n_entries + m)
        while 2 * (self.n_entries + m) > self.mask + 1:
            self._grow_slots()
        cdef cnp.int64_t[::1] sk = self._slot_keys
        cdef cnp.int64_t[::1] sr = self._slot_ref
        cdef cnp.int64_t[::1] ek = self._keys
        cdef cnp.float64_t[:, ::1] ev = self._vals
        cdef Py_ssize_t mask = self.mask
        cdef Py_ssize_t i, j, s, e
        cdef int64_t key
        with nogil:
            for i in range(m):
                key = keys[i]
                s = <Py_ssize_t>(_mix(<uint64_t>key) & mask)
                while sr[s] != -1 and sk[s] != key:
                    s = (s + 1) & mask
                if sr[s] == -1:
                    sk[s] = key
                    e = self.n_entries
                    sr[s] = e
                    ek[e] = key
                    self.n_entries += 1
                else:
                    e = sr[s]
                for j in range(w):
                    ev[e, j] += vals[i, j]

    def lookup(self, cnp.int64_t[::1] keys):
        """Return accumulated rows for keys; absent keys read as zero rows."""
        cdef Py_ssize_t m = keys.shape[0]
        cdef Py_ssize_t w = self.width
        out = np.zeros((m, w), dtype=np.float64)
        cdef cnp.float64_t[:, ::1] o = out
        cdef cnp.int64_t[::1] sk = self._slot_keys
        cdef cnp.int64_t[::1] sr = self._slot_ref
        cdef cnp.float64_t[:, ::1] ev = self._vals
        cdef Py_ssize_t mask = self.mask
        cdef Py_ssize_t i, j, s, e
        cdef int64_t key
        with nogil:
            for i in range(m):
                key = keys[i]
                s = <Py_ssize_t>(_mix(<uint64_t>key) & mask)
                while sr[s] != -1 and sk[s] != key:
                    s = (s + 1) & mask
                if sr[s] != -1:
                    e = sr[s]
                    for j in range(w):
                        o[i, j] = ev[e, j]
        return out

    def export(self):
        """Return (sorted keys, matching rows) as fresh arrays."""
        keys = np.asarray(self._keys[: self.n_entries]).copy()
        vals = np.asarray(self._vals[: self.n_entries]).copy()
        order = np.argsort(keys, kind="stable")
        return keys[order], vals[order]


def median_norms(double[:, :, ::1] raw, double[::1] ext, Py_ssize_t d):
    """Lower median over repetitions of |raw[i, r] contracted with ext|, per report.

    ``raw[i, r]`` holds d consecutive payload rows of length len(ext).
    """
    cdef Py_ssize_t m = raw.shape[0], R = raw.shape[1], P = ext.shape[0]
    cdef Py_ssize_t i, r, k, l, a
    cdef Py_ssize_t mid = (R - 1) // 2
    cdef double acc, sq, key
    cdef const double* cell
    cdef const double* e = &ext[0]
    out = np.empty(m, dtype=np.float64)
    if m == 0:
        return out
    buf_arr = np.empty(R, dtype=np.float64)
    cdef double[::1] o = out
    cdef double[::1] buf = buf_arr
    with nogil:
        for i in range(m):
            for r in range(R):
                cell = &raw[i, r, 0]
                sq = 0.0
                for k in range(d):
                    acc = 0.0
                    for l in range(P):
                        acc = acc + cell[k * P + l] * e[l]
                    sq = sq + acc * acc
                # insertion sort; R is a few dozen at most
                a = r
                while a > 0 and buf[a - 1] > sq:
                    buf[a] = buf[a - 1]
                    a -= 1
                buf[a] = sq
            o[i] = sqrt(buf[mid])
    return out


def verify_guesses(double[::1] norms, cnp.int64_t[::1] sub, cnp.int64_t[::1] order,
                   cnp.int64_t[::1] starts, double[::1] shift, cnp.int64_t[::1] k_hi,
                   cnp.int64_t[::1] k_lo, double alpha, cnp.int64_t[::1] depth_tab,
                   double[::1] grow, Py_ssize_t pad, Py_ssize_t level_count):
    """Descending guess-and-verify per group over reports sorted by group.

    Mirrors the numpy fallback: a report's level comes from a log estimate
    corrected against the boundary table, and counts only when its
    substream matches the level's depth.
    """
    cdef Py_ssize_t G = shift.shape[0], m = norms.shape[0]
    cdef Py_ssize_t g, idx, row, lo, hi, j, p
    cdef int64_t k, L
    cdef double cur, top, ltop, v, total, lower, mass, l1p = log1p(alpha)
    cdef double sig = 1.0 / (alpha * alpha)
    M_arr = np.zeros(G)
    agg_arr = np.zeros(G)
    status_arr = np.zeros(G, dtype=np.int64)
    lev_arr = np.full(m, -1, dtype=np.int64)
    mass_arr = np.zeros((G, level_count))
    tmp_arr = np.empty(m, dtype=np.int64)
    cnt_arr = np.zeros(level_count, dtype=np.int64)
    used_arr = np.empty(level_count, dtype=np.int64)
    logv_arr = np.zeros(m)
    cdef double[::1] guess = M_arr
    cdef double[::1] agg = agg_arr
    cdef cnp.int64_t[::1] status = status_arr
    cdef cnp.int64_t[::1] lev = lev_arr
    cdef double[:, ::1] masses = mass_arr
    cdef cnp.int64_t[::1] tmp = tmp_arr
    cdef cnp.int64_t[::1] cnt = cnt_arr
    cdef cnp.int64_t[::1] used = used_arr
    cdef Py_ssize_t n_used, u, a
    cdef double[::1] logv = logv_arr
    with nogil:
        # the level estimate only seeds the boundary correction below, so the
        # logs are taken once per report rather than once per guess
        for row in range(m):
            if norms[row] > 0:
                logv[row] = log(norms[row])
        for g in range(G):
            lo = starts[g]
            hi = starts[g + 1]
            if k_hi[g] < k_lo[g]:
                continue
            status[g] = -1
            k = k_hi[g]
            while k >= k_lo[g]:
                cur = ldexp(1.0, <int>k)
                top = 8.0 * shift[g] * cur
                ltop = log(top)
                n_used = 0
                for idx in range(lo, hi):
                    row = order[idx]
                    v = norms[row]
                    tmp[idx] = -1
                    if v <= 0:
                        continue
                    j = <Py_ssize_t>floor((ltop - logv[row]) / l1p)
                    if j < -1:
                        j = -1
                    if j > level_count:
                        j = level_count
                    for p in range(3):
                        if v >= top / grow[j + pad]:
                            j -= 1
                        if v < top / grow[j + 1 + pad]:
                            j += 1
                        if j < -1:
                            j = -1
                        if j > level_count:
                            j = level_count
                    if j >= 0 and j < level_count and depth_tab[j] == sub[row]:
                        tmp[idx] = j
                        if cnt[j] == 0:
                            # keep the touched levels ascending, so sums run in level order
                            a = n_used
                            while a > 0 and used[a - 1] > j:
                                used[a] = used[a - 1]
                                a -= 1
                            used[a] = j
                            n_used += 1
                        cnt[j] += 1
                # a group has a handful of reports but dozens of levels
                total = 0.0
                for u in range(n_used):
                    j = used[u]
                    L = depth_tab[j]
                    if L == 1 or cnt[j] > sig:
                        lower = top / grow[j + 1 + pad]
                        mass = lower * cnt[j]
                        if L > 1:
                            mass = mass * ldexp(1.0, <int>(L - 1))
                        total = total + mass
                if total >= cur / 2 and total <= 2 * cur:
                    guess[g] = cur
                    agg[g] = total
                    status[g] = 1
                    for u in range(n_used):
                        j = used[u]
                        L = depth_tab[j]
                        if L == 1 or cnt[j] > sig:
                            mass = top / grow[j + 1 + pad] * cnt[j]
                            if L > 1:
                                mass = mass * ldexp(1.0, <int>(L - 1))
                            masses[g, j] = mass
                    for idx in range(lo, hi):
                        lev[order[idx]] = tmp[idx]
                for u in range(n_used):
                    cnt[used[u]] = 0
                if status[g] == 1:
                    break
                k -= 1
    return M_arr, agg_arr, lev_arr, mass_arr, status_arr
