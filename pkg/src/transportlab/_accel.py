"""numba switch.

Set TRANSPORTLAB_NO_JIT=1 to route every hot kernel through its pure-numpy
twin.  The numba variants stay importable (when numba is installed) so the
benchmark can time both paths in one process.
"""
import os

ENV_FLAG = "TRANSPORTLAB_NO_JIT"

try:
    import numba
    HAVE_NUMBA = True
except ImportError:
    numba = None
    HAVE_NUMBA = False


def _flag_set():
    return os.environ.get(ENV_FLAG, "").strip().lower() in ("1", "true", "yes", "on")


USE_NUMBA = HAVE_NUMBA and not _flag_set()


def njit(*args, **kwargs):
    """numba.njit with cache and nogil on; identity when numba is missing."""
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    return numba.njit(*args, **kwargs)


def pick(nb_impl, np_impl):
    return nb_impl if USE_NUMBA else np_impl


def backend():
    return "numba" if USE_NUMBA else "numpy"
