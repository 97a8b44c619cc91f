"""Selection between the numba-jitted and pure-numpy convolution kernels.

The active backend is chosen once, lazily, from the VOXSHIELD_BACKEND
environment variable: "numba", "numpy", or "auto" (default; numba when
importable). Tests and the benchmark switch explicitly via set_backend().
"""

import os

from . import _kernels_numpy

try:
    from . import _kernels_numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _kernels_numba = None
    HAS_NUMBA = False

ENV_VAR = "VOXSHIELD_BACKEND"

_active = None


def available_backends():
    names = ["numpy"]
    if HAS_NUMBA:
        names.insert(0, "numba")
    return names


def _resolve(name):
    if name == "numpy":
        return _kernels_numpy
    if name == "numba":
        if not HAS_NUMBA:
            raise RuntimeError("numba backend requested but numba is not importable")
        return _kernels_numba
    if name == "auto":
        return _kernels_numba if HAS_NUMBA else _kernels_numpy
    raise ValueError(f"unknown backend {name!r}; expected numba, numpy or auto")


def set_backend(name):
    """Force a kernel backend ("numba" or "numpy"). Returns the module."""
    global _active
    _active = _resolve(name)
    return _active


def get_backend():
    """Active kernel module, resolving VOXSHIELD_BACKEND on first use."""
    global _active
    if _active is None:
        _active = _resolve(os.environ.get(ENV_VAR, "auto"))
    return _active


def backend_name():
    return get_backend().NAME
