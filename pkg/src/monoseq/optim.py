"""Adam optimizer with global-norm clipping and a piecewise-decay schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericFault
from .tensor import Tensor


@dataclass
class LrSchedule:
    """Piecewise-constant decay: base rate scaled down at step boundaries."""

    base: float
    boundaries: tuple[int, ...] = ()
    factors: tuple[float, ...] = (0.5, 0.25, 0.1)

    def __post_init__(self):
        if len(self.boundaries) > len(self.factors):
            raise ConfigError("LrSchedule: more boundaries than decay factors")

    def rate(self, step: int) -> float:
        factor = 1.0
        for b, f in zip(self.boundaries, self.factors):
            if step >= b:
                factor = f
        return self.base * factor

    @staticmethod
    def for_width(width: int, total_steps: int, fracs=(0.77, 0.85, 0.92)) -> "LrSchedule":
        """Initial rate 0.01/sqrt(width), decayed late in training."""
        return LrSchedule(
            base=0.01 / math.sqrt(width),
            boundaries=tuple(int(f * total_steps) for f in fracs),
        )


@dataclass
class OptimizerState:
    """Per-parameter Adam moments plus the step counter and clip threshold."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    clip_norm: float = 1000.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: LrSchedule = field(default_factory=lambda: LrSchedule(1e-3))

    @staticmethod
    def for_params(params: dict[str, Tensor], schedule: LrSchedule, clip_norm: float = 1000.0) -> "OptimizerState":
        if clip_norm <= 0:
            raise ConfigError(f"clip threshold must be positive, got {clip_norm}")
        return OptimizerState(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
            clip_norm=clip_norm,
            schedule=schedule,
        )


def global_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    return math.sqrt(total)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState) -> float:
    """Clip gradients to the global-norm threshold, then apply Adam.

    Parameters are updated in place; returns the pre-clip gradient norm.
    Non-finite gradients raise NumericFault and leave everything unchanged.
    """
    missing = [k for k in params if k not in grads]
    if missing:
        raise ConfigError(f"adam_step: missing gradients for {missing[:3]}")
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NumericFault("adam_step: non-finite gradients; parameters unchanged")
    scale = 1.0 if norm <= state.clip_norm else state.clip_norm / norm
    state.step += 1
    t = state.step
    lr = state.schedule.rate(t - 1)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, p in params.items():
        g = grads[k] * scale
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return norm
