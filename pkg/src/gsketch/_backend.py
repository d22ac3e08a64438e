"""Pick the compiled kernels when importable; GSKETCH_PURE_PYTHON=1 forces numpy."""
from __future__ import annotations

import os

from . import _fallback

if os.environ.get("GSKETCH_PURE_PYTHON") == "1":
    _native = None
else:
    try:
        from . import _kernels as _native
    except ImportError:
        _native = None

NATIVE = _native is not None
BACKEND = "cython" if NATIVE else "numpy"

poly_hash = _native.poly_hash if NATIVE else _fallback.poly_hash
SparseAccumulator = _native.SparseAccumulator if NATIVE else _fallback.SparseAccumulator
median_norms = _native.median_norms if NATIVE else _fallback.median_norms
verify_guesses = _native.verify_guesses if NATIVE else _fallback.verify_guesses
