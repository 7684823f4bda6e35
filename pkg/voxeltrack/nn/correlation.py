"""Cross-correlation of search features with target features."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..exceptions import ShapeError
from .layers import Array


def _check(search: Array, target: Array) -> None:
    if search.ndim != 3 or target.ndim != 3:
        raise ShapeError(f'features must be (C, H, W), got {search.shape} and {target.shape}')
    if search.shape[0] != target.shape[0]:
        raise ShapeError(f'channel mismatch: search has {search.shape[0]}, target has {target.shape[0]}')
    if target.shape[1] > search.shape[1] or target.shape[2] > search.shape[2]:
        raise ShapeError(f'target features {target.shape[1]}x{target.shape[2]} are larger than '
                         f'search features {search.shape[1]}x{search.shape[2]}')


def cross_correlate(search: Array, target: Array) -> Array:
    """Slide the target over the search features.

    Each entry is the sum over channels and the target extent of the
    elementwise product at that offset. The result has shape
    (Hs - Ht + 1, Ws - Wt + 1).
    """
    _check(search, target)
    windows = sliding_window_view(search, target.shape[1:], axis=(1, 2))
    return np.einsum('chwij,cij->hw', windows, target, optimize=True)


def cross_correlate_backward(grad: Array, search: Array, target: Array) -> tuple[Array, Array]:
    """Get the gradients of `cross_correlate` for the search and target."""
    windows = sliding_window_view(search, target.shape[1:], axis=(1, 2))
    grad_target = np.einsum('hw,chwij->cij', grad, windows, optimize=True)

    out_h, out_w = grad.shape
    grad_search = np.zeros_like(search, dtype=np.result_type(search, grad))
    for i in range(target.shape[1]):
        for j in range(target.shape[2]):
            grad_search[:, i:i + out_h, j:j + out_w] += target[:, i, j, None, None] * grad
    return grad_search, grad_target
