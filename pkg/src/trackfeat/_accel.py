"""Numba switch.

Set ``TRACKFEAT_NUMBA=0`` to run every hot kernel through its pure-numpy
twin instead of the compiled loop version.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

ENABLE_NUMBA = numba is not None and os.environ.get("TRACKFEAT_NUMBA", "1").lower() not in (
    "0",
    "false",
    "no",
    "off",
)
CACHE_NUMBA = True


def njit(func):
    # Compile whenever numba is importable so both paths stay testable;
    # ENABLE_NUMBA only decides which one the dispatchers pick.
    if numba is None:
        return func
    return numba.njit(cache=CACHE_NUMBA, fastmath=False)(func)


def backend_name():
    return "numba" if ENABLE_NUMBA else "numpy"
