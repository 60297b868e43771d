"""Numba switch.

Hot kernels are compiled with ``numba.njit`` unless ``SWINKOA_DISABLE_JIT`` is
set to a truthy value, or numba cannot be imported; in both cases the pure
numpy implementations are used instead. The flag is read once at import time.
"""
import os

_FALSEY = {"", "0", "false", "no", "off"}

JIT_REQUESTED = os.environ.get("SWINKOA_DISABLE_JIT", "").strip().lower() in _FALSEY

try:
    if not JIT_REQUESTED:
        raise ImportError("disabled by SWINKOA_DISABLE_JIT")
    from numba import njit, prange

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False
    prange = range

    def njit(*args, **kwargs):
        def dec(f):
            return f

        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return dec


USE_JIT = HAS_NUMBA
