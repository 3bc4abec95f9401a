"""Numba switch for the hot kernels.

Set ``NDIV_NUMBA=0`` to force the pure-numpy path. When numba is missing the
numpy path is used regardless of the flag.
"""

import functools
import os

try:
    import numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    NUMBA_AVAILABLE = False


def _flag_enabled(value):
    return value.strip().lower() not in ("0", "false", "no", "off", "")


USE_NUMBA = NUMBA_AVAILABLE and _flag_enabled(os.environ.get("NDIV_NUMBA", "1"))


def njit(func):
    """Compile ``func`` with numba when available, else return it untouched."""
    if not NUMBA_AVAILABLE:
        return func
    return functools.wraps(func)(numba.njit(cache=True)(func))


__all__ = ["NUMBA_AVAILABLE", "USE_NUMBA", "njit"]
