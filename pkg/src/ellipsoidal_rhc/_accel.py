"""Optional numba acceleration.

Hot kernels are written once in numba-compatible numpy and wrapped with
:func:`njit`. When numba is missing, or when the environment variable
``ELLIPSOIDAL_RHC_DISABLE_NUMBA`` is set to a truthy value, :func:`njit`
returns the plain Python function and every kernel runs as pure numpy.
The flag is read once at import time.
"""

from __future__ import annotations

import os

_FLAG = "ELLIPSOIDAL_RHC_DISABLE_NUMBA"

_disabled = os.environ.get(_FLAG, "").strip().lower() not in ("", "0", "false", "no")

try:
    if _disabled:
        raise ImportError
    import numba as _numba

    HAS_NUMBA = True
except ImportError:
    _numba = None
    HAS_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when acceleration is active, identity otherwise."""
    if HAS_NUMBA:
        kwargs.setdefault("cache", True)
        return _numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


def backend() -> str:
    """Name of the active kernel backend, ``"numba"`` or ``"numpy"``."""
    return "numba" if HAS_NUMBA else "numpy"
