"""Numba switch.

Hot kernels are decorated with :func:`njit` from this module.  When numba is
importable and ``BILEVEL_RL_NUMBA`` is not set to ``0`` they are compiled;
otherwise callers route to the vectorised numpy implementations instead of
running the scalar loops in the interpreter.

``BILEVEL_RL_THREADS`` caps the number of numba worker threads.
"""

import os

_FLAG = os.environ.get("BILEVEL_RL_NUMBA", "1").strip().lower()

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

USE_NUMBA = _numba is not None and _FLAG not in ("0", "false", "no", "off")

if _numba is not None:
    # the bundled TBB is often too old; skip it rather than warn
    _numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


def njit(*args, **kwargs):
    """``numba.njit`` when enabled, identity decorator otherwise."""
    if USE_NUMBA:
        kwargs.setdefault("cache", True)
        return _numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f


prange = _numba.prange if USE_NUMBA else range


def thread_count():
    """Worker count honouring ``BILEVEL_RL_THREADS``."""
    cap = os.environ.get("BILEVEL_RL_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = max(1, min(n, int(cap)))
        except ValueError:
            raise ValueError(f"BILEVEL_RL_THREADS must be an integer, got {cap!r}") from None
    return n


def configure_threads():
    if USE_NUMBA:
        _numba.set_num_threads(min(thread_count(), _numba.config.NUMBA_NUM_THREADS))
