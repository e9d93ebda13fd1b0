"""Numba switch for the hot kernels.

Set ``SKULLCARVE_NUMBA=0`` before import to force the pure-numpy paths.  Each
module that has a compiled kernel also carries a vectorized numpy version and
dispatches on :data:`USE_NUMBA`.
"""

import os

_flag = os.environ.get("SKULLCARVE_NUMBA", "1").strip().lower()

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

USE_NUMBA = _numba is not None and _flag not in ("0", "false", "no", "off")


def njit(*args, **kwargs):
    """``numba.njit`` when enabled, identity decorator otherwise."""
    if _numba is None:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    return _numba.njit(*args, cache=True, **kwargs)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
