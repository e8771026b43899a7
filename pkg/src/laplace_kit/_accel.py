"""Backend switch for the compiled kernels.

Set ``LAPLACE_KIT_BACKEND=numpy`` to bypass numba entirely. Any other value (or
none) uses numba when it can be imported.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

_backend = "numpy"


def _initial_backend():
    requested = os.environ.get("LAPLACE_KIT_BACKEND", "numba").strip().lower()
    if requested == "numpy" or not HAVE_NUMBA:
        return "numpy"
    return "numba"


def get_backend():
    return _backend


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"`` kernels for subsequent calls."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _backend = name


def njit(*args, **kwargs):
    """``numba.njit`` that degrades to the identity decorator without numba."""
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


_backend = _initial_backend()
