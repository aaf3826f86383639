"""Selects between numba-compiled kernels and their pure-numpy twins.

Set ``SEAGRID_NUMBA=0`` before import to force the numpy path. When numba is
not importable the numpy path is used regardless.
"""
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("SEAGRID_NUMBA", "1").strip().lower() not in (
    "0",
    "false",
    "no",
    "off",
)


def njit(func):
    """``numba.njit`` when available, otherwise the function itself."""
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=False, fastmath=False)(func)


def pick(numba_impl, numpy_impl):
    return numba_impl if USE_NUMBA else numpy_impl
