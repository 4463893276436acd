"""Backend selection for the hot kernels.

Set ``BRIDGETS_NO_NUMBA=1`` to force the pure-numpy path. Otherwise numba is
used when it imports cleanly. The flag is read once at import time; use
:func:`set_backend` in tests and benchmarks to switch at runtime.
"""

import os

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False


def _env_disabled():
    return os.environ.get("BRIDGETS_NO_NUMBA", "0").strip().lower() in ("1", "true", "yes")


_state = {"backend": "numba" if (HAS_NUMBA and not _env_disabled()) else "numpy"}


def backend():
    """Name of the active kernel backend, ``"numba"`` or ``"numpy"``."""
    return _state["backend"]


def set_backend(name):
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba is not installed")
    _state["backend"] = name


def njit(*args, **kwargs):
    """``numba.njit`` with caching, or an identity decorator without numba."""
    kwargs.setdefault("cache", True)
    if not HAS_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    return numba.njit(*args, **kwargs)
