"""Classic scalar Kalman filter (single input, single state)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence


@dataclass(frozen=True)
class LinearGaussianSystem:
    """x_t = A x_{t-1} + B u_t + n_t,  y_t = C x_t + m_t,  n ~ N(0, Q), m ~ N(0, R)."""

    A: float = 1.0
    B: float = 0.0
    C: float = 1.0
    Q: float = 0.0
    R: float = 0.0

    def __post_init__(self):
        if self.Q < 0 or self.R < 0:
            raise ValueError(f"noise variances must be non-negative (Q={self.Q}, R={self.R})")


@dataclass(frozen=True)
class FilterState:
    x: float
    P: float
    K: float | None = None  # gain of the update that produced this state

    def __post_init__(self):
        if self.P < 0:
            raise ValueError(f"error covariance must be non-negative, got {self.P}")


def predict(state: FilterState, sys: LinearGaussianSystem, u: float = 0.0) -> FilterState:
    x_pred = sys.A * state.x + sys.B * u
    p_pred = sys.A * state.P * sys.A + sys.Q
    return FilterState(x_pred, p_pred)


def update(pred: FilterState, sys: LinearGaussianSystem, y: float) -> FilterState:
    """Fold observation ``y`` into a predicted state; the result carries the gain."""
    denom = sys.C * pred.P * sys.C + sys.R
    if denom == 0:
        raise ZeroDivisionError("innovation variance C P C + R is zero")
    gain = pred.P * sys.C / denom
    x = pred.x + gain * (y - sys.C * pred.x)
    # clamp guards against -0.0/rounding below zero when K C == 1
    p = max((1.0 - gain * sys.C) * pred.P, 0.0)
    return FilterState(x, p, gain)


def filter_sequence(
    sys: LinearGaussianSystem,
    initial: FilterState,
    controls: Sequence[float],
    observations: Sequence[float],
) -> list[FilterState]:
    """Alternate predict/update; returns the posterior after each observation."""
    if len(controls) != len(observations):
        raise ValueError(
            f"controls ({len(controls)}) and observations ({len(observations)}) differ in length"
        )
    if not observations:
        return [initial]
    states = []
    state = initial
    for u, y in zip(controls, observations):
        state = update(predict(state, sys, u), sys, y)
        states.append(state)
    return states
