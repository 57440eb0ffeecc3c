"""Numba switch shared by all hot kernels.

Every accelerated kernel in the package has two implementations: a numba
``@njit`` loop and a pure-numpy fallback. Which one runs is decided at call
time by :func:`use_numba`, so the environment variable can be flipped inside a
test or a benchmark without re-importing anything.

Set ``STEREOMOSAIC_NUMBA=0`` (or ``false``/``off``/``no``) to force numpy.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

ENV_FLAG = "STEREOMOSAIC_NUMBA"
_OFF = {"0", "false", "off", "no"}


def use_numba() -> bool:
    if not HAVE_NUMBA:
        return False
    return os.environ.get(ENV_FLAG, "1").strip().lower() not in _OFF


def njit(func):
    """``numba.njit(cache=True)`` when numba is importable, identity otherwise."""
    if HAVE_NUMBA:
        return numba.njit(cache=True, nogil=True)(func)
    return func


def dispatch(numba_impl, numpy_impl):
    """Pick the active implementation of a kernel pair."""
    return numba_impl if use_numba() else numpy_impl
