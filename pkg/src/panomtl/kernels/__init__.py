"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is picked once at import time. Set ``PANOMTL_NUMBA=0`` to force
the numpy path (useful on platforms without numba, or to cross-check the
compiled kernels). Both modules expose the same functions.
"""
import os

from . import _numpy

BACKEND = "numpy"
_impl = _numpy

if os.environ.get("PANOMTL_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off"):
    try:
        from . import _numba
    except ImportError:  # numba missing: stay on numpy
        pass
    else:
        BACKEND = "numba"
        _impl = _numba

wrap_sample_forward = _impl.wrap_sample_forward
wrap_sample_backward = _impl.wrap_sample_backward
maxpool2_forward = _impl.maxpool2_forward
maxpool2_backward = _impl.maxpool2_backward
raycast_boxes = _impl.raycast_boxes

__all__ = [
    "BACKEND",
    "wrap_sample_forward",
    "wrap_sample_backward",
    "maxpool2_forward",
    "maxpool2_backward",
    "raycast_boxes",
]
