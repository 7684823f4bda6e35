"""Adam optimizer over named parameter arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import ShapeError
from .layers import Array


@dataclass
class AdamState:
    """First and second moment estimates and the step counter."""

    step: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)


def adam_step(params: dict[str, Array], grads: dict[str, Array], state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """Apply one bias corrected Adam update to `params` in place."""
    beta1, beta2 = betas
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    step_size = lr / correction1

    for name, param in params.items():
        grad = grads[name]
        if grad.shape != param.shape:
            raise ShapeError(f'gradient for {name} has shape {grad.shape}, expected {param.shape}')
        if name not in state.m:
            state.m[name] = np.zeros_like(param)
            state.v[name] = np.zeros_like(param)

        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * (grad * grad)

        denominator = np.sqrt(v / correction2) + eps
        param -= (step_size * m / denominator).astype(param.dtype, copy=False)
    return state


class Adam:
    """Stateful wrapper around `adam_step`."""

    def __init__(self, params: dict[str, Array], lr: float = 1e-5,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self, grads: dict[str, Array]) -> None:
        adam_step(self.params, grads, self.state, self.lr, self.betas, self.eps)
