"""
AdamW with decoupled weight decay, and polynomial learning-rate decay.
"""

import logging
from dataclasses import dataclass, field
from typing import Mapping, Union

import numpy as np

from src.errors import DimensionError, ParameterError
from src.tensorcore import Tensor

logger = logging.getLogger(__name__)


@dataclass
class OptimState:
    """
    Per-parameter AdamW moments and step counters.

    Buffers are shaped like their parameter and dropped when it is frozen.
    """
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)

    def discard(self, name: str) -> None:
        self.m.pop(name, None)
        self.v.pop(name, None)
        self.steps.pop(name, None)

    def __contains__(self, name: str) -> bool:
        return name in self.m


def adamw_step(
    params: Mapping[str, Tensor],
    state: OptimState,
    lr: Union[float, Mapping[str, float]],
    weight_decay: float = 0.01,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """
    Apply one AdamW update to every trainable parameter with a gradient.

    Args:
        params: name -> parameter tensor
        state: moment buffers, updated in place
        lr: one learning rate, or name -> learning rate
        weight_decay: decoupled decay coefficient

    Raises:
        DimensionError: if a gradient does not match its parameter
    """
    for name, p in params.items():
        if not p.requires_grad or p.grad is None:
            continue
        if p.grad.shape != p.data.shape:
            raise DimensionError(f"{name}: grad {p.grad.shape} vs param {p.data.shape}")
        rate = lr[name] if isinstance(lr, Mapping) else lr
        if rate < 0:
            raise ParameterError(f"{name}: learning rate must be >= 0, got {rate}")

        g = p.grad.astype(np.float64)
        theta = p.data.astype(np.float64)
        m = state.m.get(name, np.zeros_like(theta))
        v = state.v.get(name, np.zeros_like(theta))
        t = state.steps.get(name, 0) + 1

        theta = theta - rate * weight_decay * theta
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        theta = theta - rate * m_hat / (np.sqrt(v_hat) + eps)

        p.data = theta.astype(p.data.dtype)
        state.m[name], state.v[name], state.steps[name] = m, v, t


def poly_lr(base_lr: float, step: int, total_steps: int, power: float = 0.9) -> float:
    """
    base_lr * (1 - step / total_steps) ** power.

    Raises:
        ParameterError: if step is outside [0, total_steps]
    """
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise ParameterError(f"poly_lr needs 0 <= step <= total_steps, got {step}/{total_steps}")
    return base_lr * (1.0 - step / total_steps) ** power
