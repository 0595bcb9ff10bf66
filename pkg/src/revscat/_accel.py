"""Switch between numba-compiled kernels and their pure-numpy twins.

Set ``REVSCAT_DISABLE_NUMBA=1`` to force the numpy implementations (useful
for debugging and for the benchmark in ``benchmarks/``).
"""
import os

_DISABLED = os.environ.get("REVSCAT_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    import numba
    HAVE_NUMBA = True
except ImportError:
    numba = None
    HAVE_NUMBA = False


def use_numba():
    return HAVE_NUMBA


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f
