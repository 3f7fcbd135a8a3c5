"""Adam optimizer with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..errors import UsageError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict[Tensor, np.ndarray] = field(default_factory=dict)
    second_moment: dict[Tensor, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(
    state: AdamState,
    params: Sequence[Tensor],
    grads: Mapping[Tensor, np.ndarray],
) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.step += 1
    t = state.step
    correct1 = 1.0 - state.beta1 ** t
    correct2 = 1.0 - state.beta2 ** t
    for p in params:
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g)
        if g.shape != p.data.shape:
            raise UsageError(
                f"gradient shape {g.shape} does not match parameter shape {p.data.shape}"
            )
        m = state.first_moment.get(p)
        if m is None:
            m = np.zeros_like(p.data)
            state.first_moment[p] = m
            state.second_moment[p] = np.zeros_like(p.data)
        v = state.second_moment[p]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / correct1
        v_hat = v / correct2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype, copy=False)
    return state
