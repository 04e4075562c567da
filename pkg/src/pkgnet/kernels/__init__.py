"""Numeric inner loops with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly, unless the environment
variable ``PKGNET_DISABLE_NUMBA`` is set to a truthy value (``1``, ``true``,
``yes``). Both paths obey the same contracts and are cross-checked in tests.
"""
import os

from . import _numpy

BACKEND = "numpy"

if os.environ.get("PKGNET_DISABLE_NUMBA", "").lower() not in ("1", "true", "yes"):
    try:
        from . import _numba as _impl
        BACKEND = "numba"
    except ImportError:  # pragma: no cover
        _impl = _numpy
else:
    _impl = _numpy

crop_resize = _impl.crop_resize
median_filter = _impl.median_filter
auroc = _impl.auroc

__all__ = ["BACKEND", "crop_resize", "median_filter", "auroc"]
