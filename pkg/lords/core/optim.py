"""
AdamW with decoupled weight decay and bias correction, over plain numpy
parameter lists. Steps are pure: they return new parameters and a new state.
"""

from dataclasses import dataclass, replace
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class AdamWState:
    """Moment buffers and hyperparameters; t counts completed steps"""
    m: Tuple[np.ndarray, ...]
    v: Tuple[np.ndarray, ...]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        for name, beta in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 <= beta < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {beta}")

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **hyper) -> "AdamWState":
        return cls(
            m=tuple(np.zeros_like(p, dtype=np.float64) for p in params),
            v=tuple(np.zeros_like(p, dtype=np.float64) for p in params),
            **hyper,
        )


def adamw_step(
    state: AdamWState,
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    lr: float,
) -> Tuple[List[np.ndarray], AdamWState]:
    """
    One AdamW update.

    Args:
        state: Current optimizer state
        params: Parameter arrays
        grads: Gradients, one per parameter
        lr: Learning rate

    Returns:
        (updated parameters, updated state)
    """
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeError("params, grads and optimizer buffers differ in count")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t

    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not (p.shape == g.shape == m.shape):
            raise ShapeError(f"parameter {p.shape} and gradient {g.shape} differ in shape")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        p = p * (1.0 - lr * state.weight_decay) - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_params.append(p)
        new_m.append(m)
        new_v.append(v)

    return new_params, replace(state, m=tuple(new_m), v=tuple(new_v), t=t)
