"""Switch between numba-compiled kernels and their pure-numpy twins.

Set ``MSLRKIT_DISABLE_NUMBA=1`` before import to force the numpy path.
"""
import os

_DISABLED = os.environ.get("MSLRKIT_DISABLE_NUMBA", "0").strip().lower() in ("1", "true", "yes")

try:
    import numba as _numba
except ImportError:  # pragma: no cover
    _numba = None

HAS_NUMBA = _numba is not None
USE_NUMBA = HAS_NUMBA and not _DISABLED


def njit(fn):
    """Compile ``fn`` with numba when available; otherwise return it untouched.

    The uncompiled function still works, just slowly, so callers that
    explicitly request the jit variant never break.
    """
    if not HAS_NUMBA:
        return fn
    return _numba.njit(cache=True, nogil=True)(fn)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
