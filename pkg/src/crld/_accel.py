"""Optional numba acceleration.

Set ``CRLD_DISABLE_NUMBA=1`` to force the pure-numpy kernels. Both paths are
kept byte-for-byte equivalent; see ``crld.kernels``.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("CRLD_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


def njit(fn):
    """``numba.njit(cache=True)`` when numba is importable, identity otherwise."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True)(fn)
