"""Kernel backend selection.

Hot kernels ship in two flavours: a numba ``@njit`` version and a pure-numpy
version. ``UGNN_BACKEND=numpy`` (or ``UGNN_DISABLE_NUMBA=1``) forces the numpy
path; otherwise numba is used when it imports cleanly.
"""
import os

_requested = os.environ.get("UGNN_BACKEND", "").strip().lower()
if os.environ.get("UGNN_DISABLE_NUMBA", "") not in ("", "0"):
    _requested = "numpy"

try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep in practice
    HAVE_NUMBA = False

if _requested not in ("", "numba", "numpy"):
    raise ValueError(f"UGNN_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

USE_NUMBA = HAVE_NUMBA and _requested != "numpy"
BACKEND = "numba" if USE_NUMBA else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` with project defaults, or a no-op when numba is absent."""
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    return numba.njit(*args, **kwargs)
