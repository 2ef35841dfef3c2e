"""Adam optimizer over Tensor parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import NonFiniteError, Tensor


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        # learning_rate 0 is allowed: it must leave parameters bit-identical.
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must be in [0, 1)")


@dataclass
class AdamState:
    """First/second-moment accumulators per parameter, plus the step count."""

    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "AdamState":
        return cls(
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
            step=0,
        )


def adam_step(
    params: list[Tensor],
    grads: list[np.ndarray],
    state: AdamState,
    config: OptimizerConfig,
) -> None:
    """One bias-corrected Adam update, in place.

    Each parameter uses only its own accumulators, so updates to one tensor
    never contaminate another. A zero gradient leaves its parameter exactly
    unchanged (the update is lr * 0 / (sqrt(0) + eps) = 0).
    """
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ValueError("params, grads and state must be aligned")
    for p, g in zip(params, grads):
        if p.data.shape != g.shape:
            raise ValueError("gradient shape does not match parameter shape")
        if not np.isfinite(g).all():
            raise NonFiniteError("non-finite gradient passed to adam_step")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        p.data -= (config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)).astype(
            p.data.dtype
        )
