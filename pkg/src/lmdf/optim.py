"""Adam optimizer, one parameter block at a time."""

from __future__ import annotations

import numpy as np

from .errors import TrainingError
from .tensor import ParamTensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(param: ParamTensor, lr: float,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              eps: float = ADAM_EPS) -> ParamTensor:
    """Bias-corrected Adam update applied in place; returns the param.

    theta -= lr * m_hat / (sqrt(v_hat) + eps) with m_hat, v_hat the
    bias-corrected first and second moments of the current gradient.
    """
    g = param.grad
    if not np.all(np.isfinite(g)):
        raise TrainingError(f"non-finite gradient for parameter '{param.name}'")
    param.step_count += 1
    t = param.step_count
    np.multiply(param.adam_m, beta1, out=param.adam_m)
    param.adam_m += (1.0 - beta1) * g
    np.multiply(param.adam_v, beta2, out=param.adam_v)
    param.adam_v += (1.0 - beta2) * np.square(g)
    m_hat = param.adam_m / (1.0 - beta1 ** t)
    v_hat = param.adam_v / (1.0 - beta2 ** t)
    param.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.value.dtype, copy=False)
    return param


def adam_step_all(params, lr: float, beta1: float = ADAM_BETA1,
                  beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> None:
    """Apply adam_step to an iterable of ParamTensors."""
    for p in params:
        adam_step(p, lr, beta1=beta1, beta2=beta2, eps=eps)
