"""Adam optimizer for Parameter leaves."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter
from .errors import ShapeError, TrainingError

__all__ = ["AdamState", "adam_update", "Adam"]


@dataclass
class AdamState:
    """Per-parameter moment accumulators and step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_update(
    value: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float = 0.001,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam step, applied to ``value`` in place."""
    if grad.shape != value.shape or state.m.shape != value.shape:
        raise ShapeError("gradient/state shape does not match parameter")
    if not np.all(np.isfinite(grad)):
        raise TrainingError("non-finite gradient encountered in Adam step")
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1**state.t)
    v_hat = state.v / (1.0 - beta2**state.t)
    value -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    def __init__(
        self,
        params: list[Parameter],
        lr: float = 0.001,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.states = [
            AdamState(np.zeros_like(p.value), np.zeros_like(p.value))
            for p in self.params
        ]

    def step(self) -> None:
        for p, s in zip(self.params, self.states):
            try:
                adam_update(p.value, p.grad, s, self.lr, self.beta1, self.beta2, self.eps)
            except TrainingError as exc:
                raise TrainingError(f"{exc} (parameter {p.name!r})") from None

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
