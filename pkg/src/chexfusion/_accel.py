"""Backend selection for the hot numeric kernels.

Set ``CHEXFUSION_DISABLE_NUMBA=1`` before import to force the pure-numpy
path. If numba cannot be imported the numpy path is used regardless.
"""

import os

_FLAG = "CHEXFUSION_DISABLE_NUMBA"

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get(_FLAG, "").strip().lower() not in {"1", "true", "yes"}


def njit(func):
    """``numba.njit(cache=True)`` when numba is importable, else identity."""
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=True)(func)
