"""Bicubic resizing with the Catmull-Rom kernel.

Pixel centres are aligned (source coordinate `(o + 0.5) * in / out - 0.5`)
and samples past the border are clamped to the edge. The resize is
separable, so it is computed as `A_y @ M @ A_x.T` and the backward pass
is the transpose.
"""

import math
from functools import lru_cache

import numpy as np
import numpy.typing as npt

from ..exceptions import ShapeError
from .layers import Array


def catmull_rom_weights(t: float) -> tuple[float, float, float, float]:
    """Get the weights of the 4 taps around a fractional position.

    >>> catmull_rom_weights(0.0)
    (0.0, 1.0, 0.0, 0.0)
    """
    t2 = t * t
    t3 = t2 * t
    return ((-t3 + 2 * t2 - t) / 2,
            (3 * t3 - 5 * t2 + 2) / 2,
            (-3 * t3 + 4 * t2 + t) / 2,
            (t3 - t2) / 2)


@lru_cache(maxsize=256)
def resize_matrix(size_in: int, size_out: int) -> npt.NDArray[np.float64]:
    """Get the (out, in) matrix that resizes one axis."""
    matrix = np.zeros((size_out, size_in), dtype=np.float64)
    scale = size_in / size_out
    for o in range(size_out):
        source = (o + 0.5) * scale - 0.5
        base = math.floor(source)
        for offset, weight in enumerate(catmull_rom_weights(source - base), -1):
            matrix[o, min(max(base + offset, 0), size_in - 1)] += weight
    matrix.flags.writeable = False
    return matrix


def _matrices(shape: tuple[int, ...], out_dims: tuple[int, int]) -> tuple[Array, Array]:
    out_h, out_w = out_dims
    if out_h < 1 or out_w < 1:
        raise ShapeError(f'output size must be positive, got {out_h}x{out_w}')
    in_h, in_w = shape[-2:]
    if in_h < 1 or in_w < 1:
        raise ShapeError(f'cannot resize an empty {in_h}x{in_w} input')
    return resize_matrix(in_h, out_h), resize_matrix(in_w, out_w)


def bicubic_resize(values: Array, out_dims: tuple[int, int]) -> Array:
    """Resize the last two axes of a (H, W) or (C, H, W) array."""
    if values.ndim not in (2, 3):
        raise ShapeError(f'can only resize (H, W) or (C, H, W), got shape {values.shape}')
    rows, columns = _matrices(values.shape, out_dims)
    rows = rows.astype(values.dtype, copy=False)
    columns = columns.astype(values.dtype, copy=False)
    return rows @ values @ columns.T


def bicubic_resize_backward(grad: Array, in_dims: tuple[int, int]) -> Array:
    """Get the input gradient of `bicubic_resize`."""
    rows, columns = _matrices(in_dims, grad.shape[-2:])  # type: ignore[arg-type]
    rows = rows.astype(grad.dtype, copy=False)
    columns = columns.astype(grad.dtype, copy=False)
    return rows.T @ grad @ columns
