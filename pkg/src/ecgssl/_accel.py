"""Optional numba acceleration.

Kernels are written once as plain Python over numpy arrays. When numba is
importable and ``ECGSSL_DISABLE_NUMBA`` is unset (or ``0``), they are compiled
with ``numba.njit``; otherwise the same source runs as the pure-numpy path.
"""

from __future__ import annotations

import os

_FLAG = os.environ.get("ECGSSL_DISABLE_NUMBA", "0").strip().lower()

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

USE_NUMBA = _numba is not None and _FLAG in ("", "0", "false", "no")


def jit(fn):
    """Compile ``fn`` with numba when enabled, else return it unchanged.

    ``fastmath`` stays off so both paths follow IEEE semantics and agree
    on integer outputs (peak indices) exactly.
    """
    if not USE_NUMBA:
        return fn
    return _numba.njit(cache=True, nogil=True)(fn)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
