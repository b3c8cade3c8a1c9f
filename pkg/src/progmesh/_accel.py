"""Numba toggle for the hot kernels.

Set ``PROGMESH_NUMBA=0`` before import to run every kernel on its pure-numpy
path. The flag is read once, at import time.
"""
import os

_flag = os.environ.get("PROGMESH_NUMBA", "1").strip().lower()
NUMBA_ENABLED = _flag not in ("0", "false", "no", "off")

if NUMBA_ENABLED:
    try:
        from numba import njit as _njit
    except ImportError:  # pragma: no cover
        NUMBA_ENABLED = False

if NUMBA_ENABLED:
    def njit(fn):
        # no fastmath: results must be bit-reproducible and match the numpy path
        return _njit(cache=True, nogil=True)(fn)
else:
    def njit(fn):
        return fn


def backend():
    return "numba" if NUMBA_ENABLED else "numpy"
