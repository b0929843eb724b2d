"""Numba switch for the hot kernels.

Kernels are written once in the numba-compatible subset of Python. Setting
``RADIOMAP_NUMBA=0`` (or running without numba installed) leaves them as plain
Python functions operating on numpy arrays, which is slow but dependency free.
Compiled kernels keep their Python source reachable through ``.py_func`` so
the benchmark and the tests can run both paths side by side.
"""
import os

_flag = os.environ.get("RADIOMAP_NUMBA", "1").strip().lower()
_requested = _flag not in ("0", "false", "off", "no")

try:
    if not _requested:
        raise ImportError
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


def jit(func):
    """Compile ``func`` with numba when enabled, else return it unchanged."""
    if not HAVE_NUMBA:
        func.py_func = func
        return func
    return _njit(cache=True, nogil=True)(func)


def python_version(func):
    """The uncompiled source function behind a kernel."""
    return getattr(func, "py_func", func)
