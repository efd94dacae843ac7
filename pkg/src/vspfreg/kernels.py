"""Backend selection for the partial-volume kernels.

The compiled extension is used when it imports; set ``VSPFREG_PURE_PYTHON=1``
to force the numpy fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("VSPFREG_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py

pv_histogram = _impl.pv_histogram
pv_gradient = _impl.pv_gradient


def get_backend(name=None):
    """Return the kernel module for ``name`` ('cython' or 'python')."""
    if name in (None, BACKEND):
        return _impl
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")
