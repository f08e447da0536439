"""Numba acceleration shim.

The hot numeric kernels (single-shooting rollouts, penalty objectives and
their finite-difference gradients) are written once and compiled with numba
when available.  Setting the environment variable ``NHMPC_NUMBA=0`` before
import selects a pure-numpy fallback that runs the identical source, which
is what the test suite uses to cross-check the compiled path and what
``benchmarks/bench_kernels.py`` compares against.
"""

import os

_flag = os.environ.get("NHMPC_NUMBA", "1").strip().lower()
NUMBA_ENABLED = _flag not in ("0", "false", "no", "off")

if NUMBA_ENABLED:
    try:
        from numba import njit as _njit
    except ImportError:  # pragma: no cover
        NUMBA_ENABLED = False

if NUMBA_ENABLED:
    def jit(func):
        return _njit(cache=True)(func)
else:
    def jit(func):
        return func
