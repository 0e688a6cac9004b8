"""Numba switch.

Kernels are written once as plain Python loops and compiled with ``njit`` when
numba is importable and ``IGCN_DISABLE_NUMBA`` is unset (or "0").  Every kernel
also has a vectorized numpy twin; ``USE_NUMBA`` decides which one the public
dispatchers call.
"""
import os

_flag = os.environ.get("IGCN_DISABLE_NUMBA", "0").strip().lower()
_DISABLED = _flag not in ("", "0", "false", "no")

try:
    import numba as nb

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _DISABLED


def njit(*args, **kwargs):
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        return nb.njit(*args, **kwargs)
    if args and callable(args[0]):
        return args[0]
    return lambda func: func


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
