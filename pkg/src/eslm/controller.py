"""Adaptive confidence level driven by the relative change of CVaR between evaluations."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field


def delta_norm(cvar_prev: float, cvar_cur: float, epsilon: float = 1e-8) -> float:
    """Relative CVaR change ``(cur - prev) / (|prev| + epsilon)``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    return (cvar_cur - cvar_prev) / (abs(cvar_prev) + epsilon)


@dataclass
class ControllerState:
    alpha: float = 0.1
    gamma: float = 0.5
    epsilon: float = 1e-8
    eval_interval: int = 1000
    alpha_min: float = 0.01
    alpha_max: float = 0.5
    # history starts at CVaR_0 = 0
    cvar_history: list[float] = field(default_factory=lambda: [0.0])
    last_delta: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.alpha_min <= self.alpha_max < 1.0:
            raise ValueError(f"need 0 < alpha_min <= alpha_max < 1, got {self.alpha_min}, {self.alpha_max}")
        if self.gamma <= 0 or self.epsilon <= 0:
            raise ValueError("gamma and epsilon must be > 0")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be a positive int")
        self.alpha = min(max(self.alpha, self.alpha_min), self.alpha_max)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ControllerState":
        d = dict(d)
        d["cvar_history"] = list(d.get("cvar_history", [0.0]))
        return cls(**d)

    def copy(self) -> "ControllerState":
        return ControllerState.from_dict(self.to_dict())


def raw_update(alpha: float, gamma: float, delta: float) -> float:
    """Unclamped multiplicative step ``alpha * exp(-gamma * delta)``."""
    # exp overflows for very negative delta; the clamp saturates anyway
    return alpha * math.exp(min(-gamma * delta, 700.0))


def update_alpha(state: ControllerState, delta: float) -> ControllerState:
    new = raw_update(state.alpha, state.gamma, delta)
    out = state.copy()
    out.alpha = min(max(new, state.alpha_min), state.alpha_max)
    out.last_delta = delta
    return out


def on_eval_event(state: ControllerState, cvar_now: float) -> ControllerState:
    """Compare against the last recorded CVaR, update alpha, append ``cvar_now``."""
    delta = delta_norm(state.cvar_history[-1], cvar_now, state.epsilon)
    out = update_alpha(state, delta)
    out.cvar_history.append(float(cvar_now))
    return out
