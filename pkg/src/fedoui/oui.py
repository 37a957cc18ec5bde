"""Overfitting-Underfitting Indicator (OUI) of a pre-activation matrix."""

import numpy as np

from ._validation import as_float_array
from .exceptions import InputError


def activation_mask(preacts):
    """Binary matrix, 1 where the pre-activation is strictly positive."""
    a = as_float_array(preacts, ndim=2, name="preacts")
    return (a > 0.0).astype(np.int8)


def minority_counts(preacts):
    """Per unit, the smaller of (#active samples, #inactive samples)."""
    mask = activation_mask(preacts)
    active = mask.sum(axis=0, dtype=np.int64)
    return np.minimum(active, mask.shape[0] - active)


def oui(preacts):
    """OUI in [0, 1] of a ``B x d`` pre-activation matrix.

    0 means every unit is constantly on or off over the batch; 1 means every
    unit splits the batch as evenly as possible.  Exactly representable as
    ``k / (d * floor(B / 2))`` for an integer ``k``.
    """
    a = as_float_array(preacts, ndim=2, name="preacts")
    b, d = a.shape
    if b < 2 or d < 1:
        raise InputError(f"OUI needs at least 2 samples and 1 unit, got B={b}, d={d}")
    # single integer division keeps the value on the lattice exactly
    return int(minority_counts(a).sum()) / (d * (b // 2))
