"""Backend selection for the hot kernels.

Set ``RECYCLE_HAND_BACKEND=numpy`` to force the pure-numpy fallback path.
Any other value (or unset) uses numba when it can be imported.
"""
import os

BACKEND_ENV = "RECYCLE_HAND_BACKEND"

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

# fastmath stays off so both backends produce bit-identical buffers.
JIT_OPTIONS = {"nogil": True, "cache": True}


def use_numba():
    return HAS_NUMBA and os.environ.get(BACKEND_ENV, "numba").lower() != "numpy"


def njit(func):
    """Compile ``func`` with numba if available; otherwise return it untouched."""
    if not HAS_NUMBA:
        return func
    return numba.njit(**JIT_OPTIONS)(func)
