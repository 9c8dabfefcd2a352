"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .tensor import Tensor


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    learning_rate: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params, learning_rate: float = 4e-4, **kw) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params],
                   learning_rate=learning_rate, **kw)


def adam_step(params: list[Tensor], state: AdamState) -> None:
    """One in-place Adam update of ``params``; their grads are zeroed afterwards."""
    if len(params) != len(state.m):
        raise ContractError(f"Adam state tracks {len(state.m)} params, got {len(params)}")
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p.name or p.shape} has no gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        step = state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.data -= step.astype(p.dtype, copy=False)
        g[...] = 0
