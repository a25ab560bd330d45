"""Small input-validation helpers used across the package."""

import numpy as np

from .exceptions import NonFinite, ShapeMismatch


def as_float_array(x, shape=None, name="input"):
    """Convert ``x`` to a float64 array and check it is finite.

    ``shape`` may contain ``None`` entries as wildcards.
    """
    arr = np.asarray(x, dtype=np.float64)
    if shape is not None:
        if arr.ndim != len(shape) or any(
            s is not None and s != a for s, a in zip(shape, arr.shape)
        ):
            raise ShapeMismatch(f"{name}: expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"{name} contains NaN or Inf")
    return arr


def as_points(x, name="points"):
    """Accept a single 3-vector or an (N, 3) array; always return (N, 3)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    return as_float_array(arr, (None, 3), name)


def frozen(arr):
    """Return a read-only view so containers stay immutable."""
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


def check_same_shape(a, b, what="arrays"):
    if np.shape(a) != np.shape(b):
        raise ShapeMismatch(f"{what} differ in shape: {np.shape(a)} vs {np.shape(b)}")
