"""Kernel backend selection.

``MELMATCH_BACKEND=numpy`` forces the pure-numpy kernels; the default is
numba when it imports, numpy otherwise. :func:`use` switches at runtime.
"""

import logging
import os

from . import kernels_numpy

log = logging.getLogger(__name__)

try:
    from . import kernels_numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    kernels_numba = None
    NUMBA_AVAILABLE = False

_BACKENDS = {"numpy": kernels_numpy}
if NUMBA_AVAILABLE:
    _BACKENDS["numba"] = kernels_numba

_requested = os.environ.get("MELMATCH_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"MELMATCH_BACKEND must be 'numba' or 'numpy', got {_requested!r}")
if _requested == "numba" and not NUMBA_AVAILABLE:
    log.warning("numba not importable; falling back to numpy kernels")
    _requested = "numpy"

_current = _requested


def name() -> str:
    return _current


def get(backend: str | None = None):
    return _BACKENDS[backend or _current]


def use(backend: str) -> None:
    global _current
    if backend not in _BACKENDS:
        raise ValueError(f"backend {backend!r} unavailable; have {sorted(_BACKENDS)}")
    _current = backend


def available() -> list[str]:
    return sorted(_BACKENDS)
