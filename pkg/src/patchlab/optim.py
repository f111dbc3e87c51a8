"""Optimizer update rules: AdamW with decoupled decay and the l-inf projection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["AdamState", "adamw_update", "linf_project"]


@dataclass
class AdamState:
    """First/second moment estimates plus the bias-correction step count."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def fresh(cls, shape) -> "AdamState":
        return cls(m=np.zeros(shape), v=np.zeros(shape), step=0)


def adamw_update(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState | None = None,
    *,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[np.ndarray, AdamState]:
    """One AdamW step; decay is decoupled and applied before the moment update.

    Returns the new parameter and advanced state; inputs are not mutated.
    """
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape:
        raise ValueError(f"param shape {param.shape} != grad shape {grad.shape}")
    if state is None:
        state = AdamState.fresh(param.shape)
    if state.m.shape != param.shape or state.v.shape != param.shape:
        raise ValueError("optimizer state shape does not match param")
    beta1, beta2 = betas
    out = param * (1.0 - lr * weight_decay)
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    out = out - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out, AdamState(m=m, v=v, step=t)


def linf_project(sigma: np.ndarray, radius: float) -> np.ndarray:
    """Project onto the l-inf ball of the given radius (elementwise clamp)."""
    if radius < 0:
        raise ValueError(f"radius must be nonnegative, got {radius}")
    return np.clip(np.asarray(sigma, dtype=np.float64), -radius, radius)
