"""Shared numba configuration.

All kernels use IEEE semantics (no fastmath) so that results are reproducible
bit for bit, and the numpy error model so divisions by zero yield inf/nan
instead of raising inside compiled code.
"""

import functools
import os

import numba

# the bundled TBB is too old; prefer the layers that are always usable
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

jit = functools.partial(numba.njit, cache=True, error_model="numpy")
pjit = functools.partial(numba.njit, cache=True, error_model="numpy", parallel=True)

THREADS_ENV = "INVRENDER_THREADS"


def configure_threads(n=None):
    """Set the numba worker count.

    ``n=None`` reads ``INVRENDER_THREADS``; values above the numba pool size
    are clipped. Returns the active thread count.
    """
    if n is None:
        env = os.environ.get(THREADS_ENV)
        if not env:
            return numba.get_num_threads()
        n = int(env)
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n
