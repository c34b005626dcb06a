"""Hot loops behind the tensor-core ops.

Two interchangeable backends live here: ``_numba`` (njit-compiled loops) and
``_numpy`` (vectorised over output positions). Both walk the reduction in the
same order, so forward results agree bit for bit. Set
``DCFFNET_DISABLE_NUMBA=1`` to force the numpy path.
"""
import os

from . import _numpy

_DISABLED = os.environ.get("DCFFNET_DISABLE_NUMBA", "").lower() in ("1", "true", "yes", "on")

if _DISABLED:
    _impl = _numpy
else:
    try:
        from . import _numba as _impl
    except ImportError:  # numba missing or broken
        _impl = _numpy

BACKEND = "numba" if _impl is not _numpy else "numpy"


def get_backend(name=None):
    """Return the kernel module for ``name`` ("numba" or "numpy"), or the active one."""
    if name is None:
        return _impl
    if name == "numpy":
        return _numpy
    if name == "numba":
        from . import _numba

        return _numba
    raise ValueError(f"unknown kernel backend {name!r}")


conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_weight = _impl.conv2d_backward_weight
xcorr_forward = _impl.xcorr_forward
xcorr_backward = _impl.xcorr_backward
resize_forward = _impl.resize_forward
resize_backward = _impl.resize_backward
