"""Backend selection for the hot pairwise kernels.

Every accelerated kernel exists twice: a numba ``@njit`` loop and a
vectorised numpy twin.  Set ``SPECBIAS_DISABLE_NUMBA=1`` to force the numpy
path (or when numba is not importable).  Tests and the benchmark switch at
runtime with :func:`use_backend`.
"""
from __future__ import annotations

import contextlib
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_TRUTHY = {"1", "true", "yes", "on"}

HAVE_NUMBA = numba is not None
_backend = (
    "numpy"
    if (not HAVE_NUMBA or os.environ.get("SPECBIAS_DISABLE_NUMBA", "").lower() in _TRUTHY)
    else "numba"
)


def njit(func=None, **kwargs):
    """``numba.njit`` with caching on; identity decorator without numba."""
    opts = {"cache": True, "fastmath": False}
    opts.update(kwargs)

    def wrap(f):
        if not HAVE_NUMBA:
            return f
        return numba.njit(**opts)(f)

    if func is None:
        return wrap
    return wrap(func)


def backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _backend = name


@contextlib.contextmanager
def use_backend(name: str):
    old = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(old)


def dispatch(numba_impl, numpy_impl):
    """Return the implementation matching the active backend."""
    return numba_impl if _backend == "numba" else numpy_impl
