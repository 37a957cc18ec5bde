"""Small input-checking helpers in the spirit of ``sklearn.utils.validation``."""

import numpy as np

from .exceptions import InputError


def as_float_array(x, ndim=None, name="array"):
    """Convert to a C-contiguous float64 array and check dimensionality/finiteness."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise InputError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains NaN or Inf")
    return arr


def as_label_array(y, n_classes=None, name="labels"):
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise InputError(f"{name} must be 1-dimensional")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise InputError(f"{name} must be integers")
    arr = arr.astype(np.int64)
    if n_classes is not None and arr.size and (arr.min() < 0 or arr.max() >= n_classes):
        raise InputError(f"{name} must lie in [0, {n_classes})")
    return arr


def check_unit_interval(values, name="values"):
    arr = as_float_array(values, ndim=1, name=name)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise InputError(f"{name} must lie in [0, 1]")
    return arr
