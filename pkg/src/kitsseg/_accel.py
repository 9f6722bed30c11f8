"""Backend selection for the hot kernels.

Kernels exist twice: a numba ``@njit`` version and a pure-numpy version.
Set ``KITSSEG_DISABLE_NUMBA=1`` to force the numpy path (also used when numba
is not importable).
"""
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False


def _env_disabled():
    return os.environ.get("KITSSEG_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")


_backend = "numpy" if (_env_disabled() or not HAVE_NUMBA) else "numba"


def backend():
    """Name of the active kernel backend, ``"numba"`` or ``"numpy"``."""
    return _backend


def set_backend(name):
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _backend = name


def njit(*args, **kwargs):
    """``numba.njit`` with caching on, or identity when numba is missing."""
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)

    def wrap(fn):
        return fn

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return wrap
