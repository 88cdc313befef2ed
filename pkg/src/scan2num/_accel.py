"""Numba switch shared by the kernel module.

Set ``S2N_NUMBA=0`` to force the pure-numpy code paths.  Numba is also
skipped silently when it cannot be imported.
"""
import os

_FLAG = os.environ.get("S2N_NUMBA", "1").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover - numba ships with the dev env
    numba = None

USE_NUMBA = numba is not None and _FLAG not in ("0", "false", "no", "off")
HAVE_NUMBA = numba is not None


def njit(fn):
    """Compile ``fn`` with numba when available; otherwise return it as is."""
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def set_threads(n):
    """Apply a thread budget to numba and the BLAS backend."""
    n = max(1, int(n))
    if numba is not None:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return
    threadpool_limits(limits=n)
