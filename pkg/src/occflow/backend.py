"""Kernel backend selection.

The env var ``OCCFLOW_BACKEND`` picks the compute backend at import time:

* ``numba`` - loop kernels JIT-compiled by numba (default when available)
* ``numpy`` - pure-numpy reference kernels

``set_backend`` switches at runtime; all ops resolve kernels through
``backend.kernels`` at call time, so a switch takes effect immediately.
"""

import os
import warnings

from . import kernels_numpy
from .errors import ConfigError

kernels = kernels_numpy
name = "numpy"


def _load_numba_kernels():
    from . import kernels_numba
    return kernels_numba


def set_backend(requested):
    """Select the kernel backend ("numba" or "numpy")."""
    global kernels, name
    requested = requested.lower()
    if requested == "numpy":
        kernels = kernels_numpy
        name = "numpy"
    elif requested == "numba":
        kernels = _load_numba_kernels()
        name = "numba"
    else:
        raise ConfigError(f"unknown backend {requested!r}; expected 'numba' or 'numpy'")
    return name


def _init_from_env():
    requested = os.environ.get("OCCFLOW_BACKEND", "auto").lower()
    if requested in ("", "auto"):
        try:
            set_backend("numba")
        except ImportError:
            warnings.warn("numba unavailable; falling back to the numpy backend",
                          RuntimeWarning, stacklevel=2)
    else:
        set_backend(requested)


_init_from_env()
