"""Input validation helpers shared by the domain types and loaders."""

from __future__ import annotations

import numpy as np


class InputError(ValueError):
    """Raised when arguments violate a documented precondition."""


class DimensionError(InputError):
    """Raised when a vector has the wrong length or an array the wrong shape."""


def require(condition: bool, message: str) -> None:
    if not condition:
        raise InputError(message)


def as_vector(value, length: int, name: str) -> np.ndarray:
    """Coerce ``value`` to a read-only float vector of the given length.

    Scalars are broadcast; sequences must match ``length`` exactly.
    """
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(length, float(arr))
    elif arr.ndim == 1:
        if arr.shape[0] != length:
            raise DimensionError(
                f"{name}: expected length {length}, got {arr.shape[0]}"
            )
        arr = arr.copy()
    else:
        raise DimensionError(f"{name}: expected a scalar or 1-d vector")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name}: contains non-finite entries")
    arr.setflags(write=False)
    return arr


def same_length(*pairs) -> None:
    """Check ``(name, vector)`` pairs all share one length."""
    lengths = {name: len(vec) for name, vec in pairs}
    if len(set(lengths.values())) > 1:
        raise DimensionError(f"length mismatch: {lengths}")


def frozen(arr: np.ndarray) -> np.ndarray:
    out = np.asarray(arr, dtype=float).copy()
    out.setflags(write=False)
    return out
