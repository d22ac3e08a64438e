"""Seeded k-wise independent hashing over the Mersenne prime field 2^61 - 1.

Every random choice in the library flows from one 64-bit experiment seed:
``derive_seed`` names a sub-stream by a path of labels, and ``PolyHash``
turns a derived seed into polynomial hash functions, one coefficient set per
instance index.
"""
from __future__ import annotations

import hashlib

import numpy as np

from ._backend import poly_hash

MERSENNE61 = (1 << 61) - 1
_P = np.uint64(MERSENNE61)
_MASK64 = (1 << 64) - 1


def _encode(part) -> bytes:
    # typed, length-prefixed parts so that no two distinct paths share an encoding
    if isinstance(part, (int, np.integer)):
        return b"i" + (int(part) & _MASK64).to_bytes(8, "little")
    raw = str(part).encode()
    return b"s" + len(raw).to_bytes(4, "little") + raw


def derive_seed(seed: int, *path) -> int:
    """Deterministically derive an independent 64-bit seed for a labelled sub-stream."""
    h = hashlib.blake2b(digest_size=8, person=b"gsketch-seed")
    h.update((int(seed) & _MASK64).to_bytes(8, "little"))
    for part in path:
        h.update(_encode(part))
    return int.from_bytes(h.digest(), "little")


def splitmix64(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = z + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def instance_uniform(seed: int, instances) -> np.ndarray:
    """One uniform [0, 1) draw per instance index, stable under subsetting."""
    inst = np.asarray(instances, dtype=np.uint64)
    z = splitmix64(splitmix64(inst) ^ np.uint64(seed & _MASK64))
    return (z >> np.uint64(11)).astype(np.float64) / float(1 << 53)


class PolyHash:
    """Degree-(k-1) polynomial hashes mod 2^61 - 1, giving k-wise independence.

    Instance ``i`` gets its own coefficient vector, generated counter-style from
    ``(seed, i)`` so any subset of instances can be rebuilt without the rest.
    """

    def __init__(self, seed: int, k: int, n_instances: int = 1, first_instance: int = 0):
        if k < 1:
            raise ValueError("k must be positive")
        self.seed = int(seed) & _MASK64
        self.k = int(k)
        inst = np.arange(first_instance, first_instance + n_instances, dtype=np.uint64)
        cells = inst[:, None] * np.uint64(k) + np.arange(k, dtype=np.uint64)[None, :]
        raw = splitmix64(splitmix64(cells) ^ np.uint64(self.seed))
        self.coeffs = np.ascontiguousarray(raw % _P)
        self.first_instance = first_instance

    def values(self, xs, rows=None) -> np.ndarray:
        xs = np.ascontiguousarray(np.asarray(xs).astype(np.uint64))
        if rows is None:
            rows = np.zeros(len(xs), dtype=np.int64)
        rows = np.ascontiguousarray(np.asarray(rows, dtype=np.int64))
        return poly_hash(self.coeffs, rows, xs)

    def buckets(self, xs, n_buckets: int, rows=None) -> np.ndarray:
        return (self.values(xs, rows) % np.uint64(n_buckets)).astype(np.int64)

    def signs(self, xs, rows=None) -> np.ndarray:
        bit = (self.values(xs, rows) & np.uint64(1)).astype(np.float64)
        return 1.0 - 2.0 * bit

    def uniform(self, xs, rows=None) -> np.ndarray:
        return self.values(xs, rows).astype(np.float64) / float(MERSENNE61)
