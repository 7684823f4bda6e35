"""Weighted binary cross entropy on logits."""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from ..exceptions import ConfigError, NonFiniteError, ShapeError
from .layers import Array


@dataclass(frozen=True, eq=False)
class LossSpec:
    """Soft label map and per-pixel weights."""

    labels: Array
    weights: Array

    def __post_init__(self) -> None:
        if self.labels.shape != self.weights.shape:
            raise ShapeError(f'labels {self.labels.shape} and weights {self.weights.shape} differ in shape')
        if np.any(self.weights < 0):
            raise ConfigError('loss weights must be non-negative')


def weighted_bce(pred: Array, spec: LossSpec) -> tuple[float, Array]:
    """Get the mean weighted BCE and its gradient for the logits.

    The logistic is evaluated in log space, so large logits saturate
    instead of overflowing.

    Raises:
        NonFiniteError: If the prediction has NaN or infinite values.
    """
    if pred.shape != spec.labels.shape:
        raise ShapeError(f'prediction {pred.shape} and labels {spec.labels.shape} differ in shape')
    if not np.all(np.isfinite(pred)):
        raise NonFiniteError('prediction contains non-finite values')

    labels, weights = spec.labels, spec.weights
    losses = -weights * (labels * log_expit(pred) + (1 - labels) * log_expit(-pred))
    grad = weights * (expit(pred) - labels) / pred.size
    return float(losses.mean()), grad.astype(pred.dtype, copy=False)
