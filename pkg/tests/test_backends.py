import hashlib
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gsketch import _backend, _fallback
from gsketch.estimator import verify_inputs
from gsketch.generators import gaussian
from gsketch.gsampler import N_CLASSES, SamplerBank, SamplerConfig
from gsketch.hashing import MERSENNE61

kernels = pytest.importorskip("gsketch._kernels", reason="compiled kernels not built")


def test_compiled_backend_is_selected_by_default():
    if os.environ.get("GSKETCH_PURE_PYTHON") == "1":
        assert _backend.BACKEND == "numpy"
    else:
        assert _backend.BACKEND == "cython"


@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_poly_hash_agrees(seed, k):
    rng = np.random.default_rng(seed)
    coeffs = rng.integers(0, MERSENNE61, size=(5, k), dtype=np.uint64)
    rows = rng.integers(0, 5, size=300).astype(np.int64)
    xs = rng.integers(0, 2**63, size=300, dtype=np.uint64)
    assert np.array_equal(kernels.poly_hash(coeffs, rows, xs), _fallback.poly_hash(coeffs, rows, xs))


@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_accumulators_agree(seed, width):
    rng = np.random.default_rng(seed)
    accs = [kernels.SparseAccumulator(width, 4), _fallback.SparseAccumulator(width, 4)]
    for _ in range(4):
        keys = rng.integers(-50, 50, size=rng.integers(0, 80)).astype(np.int64)
        vals = rng.standard_normal((len(keys), width))
        for acc in accs:
            acc.add(keys, vals)
    probe = np.arange(-60, 60, dtype=np.int64)
    (k1, v1), (k2, v2) = (acc.export() for acc in accs)
    assert len(accs[0]) == len(accs[1])
    # both sum each key's contributions in arrival order
    assert np.array_equal(np.sort(k1), k2)
    assert np.array_equal(accs[0].lookup(probe), accs[1].lookup(probe))


def _reports(seed, d=3, n=1024):
    A, b = gaussian(n, d, seed=seed)
    bank = SamplerBank(SamplerConfig(d=d, n=n, c_rep=1.0), seed=seed, n_instances=8)
    bank.insert_all(np.arange(n), A, b)
    bank.freeze()
    x = np.random.default_rng(seed).standard_normal(d)
    cells, _, raw1, _, _ = bank._reports(x, None)
    return bank, cells, raw1, np.append(x, -1.0)


@pytest.mark.parametrize("seed", range(3))
def test_query_kernels_agree(seed):
    bank, cells, raw1, ext = _reports(seed)
    d = bank.config.d
    fast = kernels.median_norms(raw1, ext, d)
    slow = _fallback.median_norms(raw1, ext, d)
    assert np.allclose(fast, slow, rtol=1e-12, atol=0)
    inst = cells // bank.cpi
    local = cells % bank.cpi
    group = inst * N_CLASSES + local // bank.n_sub
    _, args = verify_inputs(slow, local % bank.n_sub + 1, group, bank.boundary_shift[inst], bank.alpha,
                            bank.config.n, bank.n_levels, c_depth=bank.config.c_depth)
    for a, b in zip(kernels.verify_guesses(*args), _fallback.verify_guesses(*args)):
        assert np.array_equal(a, b) if a.dtype.kind == "i" else np.allclose(a, b, rtol=1e-12, atol=0)


_PROBE = """
import hashlib, numpy as np
from gsketch import BoostedSampler, SamplerConfig, _backend
from gsketch.generators import gaussian
A, b = gaussian(512, 3, seed=4)
s = BoostedSampler(SamplerConfig(d=3, n=512), 9, delta=0.05).insert(np.arange(512), A, b).freeze()
ids, vec, p, used = s.draw_many(np.array([0.5, -1.0, 0.25]), 2000)
print(_backend.BACKEND, hashlib.sha256(ids.tobytes() + used.tobytes()).hexdigest(),
      repr(float(np.abs(vec).sum())), repr(float(p.sum())))
"""


def _probe(pure: bool):
    env = dict(os.environ)
    env.pop("GSKETCH_PURE_PYTHON", None)
    if pure:
        env["GSKETCH_PURE_PYTHON"] = "1"
    out = subprocess.run([sys.executable, "-c", _PROBE], capture_output=True, text=True, env=env, check=True)
    return out.stdout.split()


def test_pure_python_switch_reproduces_the_draws():
    native, pure = _probe(False), _probe(True)
    assert native[0] == "cython" and pure[0] == "numpy"
    assert native[1] == pure[1]
    assert float(native[2]) == pytest.approx(float(pure[2]), rel=1e-9)
    assert float(native[3]) == pytest.approx(float(pure[3]), rel=1e-9)
