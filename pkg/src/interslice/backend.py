"""Kernel backend selection.

Two interchangeable implementations of the hot array kernels exist:

* ``numpy``  -- im2col + BLAS matmul (default; fastest wherever a tuned
  BLAS is present, which in practice is everywhere numpy is installed)
* ``numba``  -- explicit @njit loop kernels, parallelized over
  independent output blocks so results are run-to-run deterministic

The environment variable ``INTERSLICE_BACKEND`` selects the backend at
import time; :func:`set_backend` overrides it at runtime (used by the
benchmark and the parity tests). See ``benchmarks/bench_kernels.py`` for
the measured comparison.
"""

import os

from .errors import ConfigError

ENV_VAR = "INTERSLICE_BACKEND"

_VALID = ("numpy", "numba")

try:
    import numba  # noqa: F401

    _HAVE_NUMBA = True
except ImportError:
    _HAVE_NUMBA = False


def _initial_backend():
    name = os.environ.get(ENV_VAR, "").strip().lower()
    if not name:
        return "numpy"
    if name not in _VALID:
        raise ConfigError(f"{ENV_VAR} must be one of {_VALID}, got {name!r}")
    if name == "numba" and not _HAVE_NUMBA:
        raise ConfigError(f"{ENV_VAR}=numba requested but numba is not importable")
    return name


_backend = _initial_backend()


def numba_available():
    return _HAVE_NUMBA


def get_backend():
    """Name of the active kernel backend."""
    return _backend


def set_backend(name):
    """Switch kernel backend at runtime. Returns the previous backend name."""
    global _backend
    if name not in _VALID:
        raise ConfigError(f"backend must be one of {_VALID}, got {name!r}")
    if name == "numba" and not _HAVE_NUMBA:
        raise ConfigError("numba backend requested but numba is not importable")
    previous = _backend
    _backend = name
    return previous
