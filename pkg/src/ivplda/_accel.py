"""Numba switch.

Kernels are always defined in two flavours: a loop-style function compiled
with numba (when importable) and a vectorised numpy function.  Which one the
public dispatch names bind to is decided once, at import time, from the
``IVPLDA_DISABLE_NUMBA`` environment variable.
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get("IVPLDA_DISABLE_NUMBA", "0").lower() in ("", "0", "false", "no")

_JIT_KWARGS = {"nopython": True, "cache": True, "nogil": True}


def njit(func=None, **overrides):
    """Compile ``func`` with numba, or return it untouched when numba is missing."""
    if func is None:
        return lambda f: njit(f, **overrides)
    if not HAVE_NUMBA:
        return func
    return numba.jit(**{**_JIT_KWARGS, **overrides})(func)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
