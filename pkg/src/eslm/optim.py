"""AdamW with global-norm clipping and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class OptimConfig:
    lr_max: float = 6e-4
    lr_min: float = 6e-5
    warmup_steps: int = 2000
    decay_steps: int = 200_000
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.warmup_steps < 0 or self.decay_steps < self.warmup_steps:
            raise ValueError("need 0 <= warmup_steps <= decay_steps")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_schedule(step: int, cfg: OptimConfig) -> float:
    """Linear warmup to ``lr_max``, cosine down to ``lr_min`` at ``decay_steps``, then flat."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < cfg.warmup_steps:
        return cfg.lr_max * (step + 1) / cfg.warmup_steps
    if step >= cfg.decay_steps:
        return cfg.lr_min
    ratio = (step - cfg.warmup_steps) / (cfg.decay_steps - cfg.warmup_steps)
    return cfg.lr_min + 0.5 * (1.0 + math.cos(math.pi * ratio)) * (cfg.lr_max - cfg.lr_min)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.square(g, dtype=np.float64).sum()) for g in grads.values()))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale so the global L2 norm is at most ``max_norm``; returns (grads, pre-clip norm)."""
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        grads = {k: (g * g.dtype.type(factor)) for k, g in grads.items()}
    return grads, norm


class AdamW:
    """Decoupled weight decay Adam; decay applies to matrices (ndim >= 2) only."""

    def __init__(self, arrays: dict[str, np.ndarray], cfg: OptimConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(a) for k, a in arrays.items()}
        self.v = {k: np.zeros_like(a) for k, a in arrays.items()}
        self.t = 0

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        """Update ``arrays`` in place."""
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for k, p in arrays.items():
            g = grads[k]
            dt = p.dtype.type
            if cfg.weight_decay and p.ndim >= 2:
                p *= dt(1.0 - lr * cfg.weight_decay)
            m, v = self.m[k], self.v[k]
            m *= dt(cfg.beta1)
            m += dt(1.0 - cfg.beta1) * g
            v *= dt(cfg.beta2)
            v += dt(1.0 - cfg.beta2) * (g * g)
            denom = np.sqrt(v / dt(bc2)) + dt(cfg.eps)
            p -= dt(lr / bc1) * m / denom


def optimizer_step(params, grads: dict[str, np.ndarray], opt: AdamW, step: int) -> tuple[float, float]:
    """Clip, schedule and apply one AdamW update to ``params``; returns (lr, grad norm)."""
    grads, norm = clip_grads(grads, opt.cfg.grad_clip)
    lr = lr_schedule(step, opt.cfg)
    opt.step(params.state_arrays(), grads, lr)
    return lr, norm
