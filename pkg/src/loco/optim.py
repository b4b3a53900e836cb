"""Warmup + cosine learning-rate schedule, SGD and LARS."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["ScheduleConfig", "OptimizerConfig", "lr_at", "sgd_step", "lars_step", "Optimizer"]

LARS_EPS = 1e-9


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float = 0.3
    warmup_epochs: int = 1
    total_epochs: int = 10
    steps_per_epoch: int = 20

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.steps_per_epoch < 1 or self.total_epochs < 1:
            raise ValueError("total_epochs and steps_per_epoch must be >= 1")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ValueError("warmup_epochs must lie in [0, total_epochs]")

    @property
    def total_steps(self):
        return self.total_epochs * self.steps_per_epoch

    @property
    def warmup_steps(self):
        return self.warmup_epochs * self.steps_per_epoch


def lr_at(schedule: ScheduleConfig, step: float) -> float:
    """Linear ramp from 0 over the warmup, then half-cosine decay to 0.

    ``step`` may be fractional; ``schedule.total_steps`` is the last valid value.
    """
    total, warm = schedule.total_steps, schedule.warmup_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step < warm:
        return schedule.base_lr * step / warm
    if total == warm:
        return schedule.base_lr
    progress = (step - warm) / (total - warm)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "lars"
    momentum: float = 0.9
    weight_decay: float = 1e-6
    trust_coefficient: float = 0.001

    def __post_init__(self):
        if self.kind not in ("sgd", "lars"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.kind == "lars" and self.trust_coefficient <= 0:
            raise ValueError("trust_coefficient must be positive")


def _check(params, grads):
    if set(params) != set(grads):
        missing = set(params) ^ set(grads)
        raise KeyError(f"parameter/gradient names differ: {sorted(missing)[:5]}")
    for name in params:
        if np.shape(params[name]) != np.shape(grads[name]):
            raise ValueError(f"shape mismatch for {name}: {np.shape(params[name])} vs "
                             f"{np.shape(grads[name])}")


def sgd_step(params, grads, lr, momentum=0.0, weight_decay=0.0, velocity=None):
    """``v <- m v + g + wd w``; ``w <- w - lr v``. Returns new params (and updates ``velocity``)."""
    _check(params, grads)
    out = {}
    for name in sorted(params):
        w = params[name]
        d = grads[name] + weight_decay * w if weight_decay else grads[name]
        if velocity is not None and momentum:
            v = velocity.get(name)
            d = d if v is None else momentum * v + d
            velocity[name] = d
        out[name] = (w - lr * d).astype(w.dtype, copy=False)
    return out


def lars_step(params, grads, lr, trust_coefficient=0.001, weight_decay=0.0, momentum=0.0,
              velocity=None):
    """Layer-wise adaptive rate scaling, one rate per tensor.

    local = eta * ||w|| / (||g|| + wd ||w|| + 1e-9); the update direction is
    ``g + wd w`` scaled by ``lr * local``. Tensors with a zero weight or
    gradient norm take a plain ``lr`` step.
    """
    _check(params, grads)
    out = {}
    for name in sorted(params):
        w = params[name]
        g = grads[name]
        w_norm = float(np.linalg.norm(w))
        g_norm = float(np.linalg.norm(g))
        if w_norm > 0 and g_norm > 0:
            local = trust_coefficient * w_norm / (g_norm + weight_decay * w_norm + LARS_EPS)
        else:
            local = 1.0
        step = lr * local * (g + weight_decay * w if weight_decay else g)
        if velocity is not None and momentum:
            v = velocity.get(name)
            step = step if v is None else momentum * v + step
            velocity[name] = step
        out[name] = (w - step).astype(w.dtype, copy=False)
    return out


class Optimizer:
    """Stateful wrapper holding momentum buffers, iterating names in sorted order."""

    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params, grads, lr):
        c = self.config
        if c.kind == "sgd":
            return sgd_step(params, grads, lr, c.momentum, c.weight_decay, self.velocity)
        return lars_step(params, grads, lr, c.trust_coefficient, c.weight_decay, c.momentum,
                         self.velocity)
