"""Backend selection for the hot kernels.

Set ``VISIGRID_BACKEND=numpy`` to force the pure-numpy path; the default is
numba when it imports cleanly.
"""
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep in practice
    numba = None
    HAVE_NUMBA = False

ENV_FLAG = "VISIGRID_BACKEND"

_backend = "numba" if HAVE_NUMBA and os.environ.get(ENV_FLAG, "numba").lower() != "numpy" else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` with caching, or an identity decorator without numba."""
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)


def backend():
    return _backend


def set_backend(name):
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _backend = name


class use_backend:
    """Context manager that temporarily switches the kernel backend."""

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        self.prev = _backend
        set_backend(self.name)
        return self

    def __exit__(self, *exc):
        set_backend(self.prev)
        return False
