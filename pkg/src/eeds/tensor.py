"""Dense 4-D tensors in (N, C, H, W) layout.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 (float64 is
accepted everywhere so the gradient checker can run the same code in double
precision).  The helpers here enforce the shape rules used across the package:
exactly four dimensions, every dimension at least one, and no broadcasting in
binary operations.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

DTYPE = np.float32

# Element counts must stay addressable by a signed 64-bit index.
_MAX_ELEMENTS = 2**62


def check_shape(shape: Sequence[int]) -> tuple[int, int, int, int]:
    shape = tuple(int(d) for d in shape)
    if len(shape) != 4:
        raise ValueError(f"tensor shape must have 4 dims (N, C, H, W), got {shape}")
    if any(d < 1 for d in shape):
        raise ValueError(f"zero or negative dimension in shape {shape}")
    if math.prod(shape) > _MAX_ELEMENTS:
        raise OverflowError(f"element count of shape {shape} overflows")
    return shape  # type: ignore[return-value]


def check_tensor(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ValueError(f"{name} must be a 4-D array, got {getattr(x, 'shape', type(x))}")
    check_shape(x.shape)
    return x


def zeros(shape: Sequence[int], dtype=DTYPE) -> np.ndarray:
    return np.zeros(check_shape(shape), dtype=dtype)


def as_tensor(values, dtype=DTYPE) -> np.ndarray:
    """Copy ``values`` into a contiguous 4-D tensor.

    1-D, 2-D and 3-D inputs are promoted by prepending unit dimensions, so a
    ``(H, W)`` image becomes ``(1, 1, H, W)``.
    """
    arr = np.array(values, dtype=dtype, copy=True)
    while arr.ndim < 4:
        arr = arr[np.newaxis]
    return np.ascontiguousarray(check_tensor(arr))


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch in add: {a.shape} vs {b.shape}")
    return a + b


def concat_channels(parts: Sequence[np.ndarray]) -> np.ndarray:
    if not parts:
        raise ValueError("concat_channels needs at least one part")
    n, _, h, w = parts[0].shape
    for p in parts[1:]:
        if (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise ValueError(
                f"batch/spatial mismatch in concat: {parts[0].shape} vs {p.shape}"
            )
    return np.concatenate(parts, axis=1)


def split_channels(x: np.ndarray, sizes: Sequence[int]) -> list[np.ndarray]:
    """Inverse of :func:`concat_channels`."""
    if sum(sizes) != x.shape[1]:
        raise ValueError(f"channel sizes {list(sizes)} do not sum to {x.shape[1]}")
    offsets = np.cumsum(sizes)[:-1]
    return [np.ascontiguousarray(p) for p in np.split(x, offsets, axis=1)]
