"""AdamW with per-parameter learning rates, global-norm clipping and linear warmup."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, MutableMapping

import numpy as np

from .errors import ConfigError, NumericError


@dataclass(frozen=True)
class Schedule:
    warmup_steps: int = 0

    def __post_init__(self):
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be nonnegative")


@dataclass(frozen=True)
class OptimConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_max_norm: float | None = None
    schedule: Schedule = field(default_factory=Schedule)

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {(self.beta1, self.beta2)}")
        if not self.eps > 0:
            raise ConfigError("eps must be positive when executing")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if self.clip_max_norm is not None and not self.clip_max_norm > 0:
            raise ConfigError("clip_max_norm must be positive or None")


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def lr_at_step(schedule: Schedule | int, t: int) -> float:
    """Linear ramp 0 -> 1 over the warmup, then constant 1."""
    warmup = schedule.warmup_steps if isinstance(schedule, Schedule) else int(schedule)
    if t < 0:
        raise ConfigError("step must be nonnegative")
    if warmup == 0 or t >= warmup:
        return 1.0
    return t / warmup


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_global_norm(grads: MutableMapping[str, np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the factor applied (1.0 when no clipping was needed).
    """
    if not max_norm > 0:
        raise ConfigError("max_norm must be positive")
    g = global_norm(grads)
    if not math.isfinite(g):
        raise NumericError("non-finite gradient norm")
    if g <= max_norm:
        return 1.0
    s = max_norm / g
    for k in grads:
        grads[k] = grads[k] * s
    return s


def adamw_step(
    params: MutableMapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamWState,
    per_param_lr: Mapping[str, float],
    config: OptimConfig,
    decay_lr: Mapping[str, float] | float | None = None,
) -> None:
    """One decoupled-weight-decay Adam step, in place on ``params`` and ``state``.

    ``decay_lr`` is the rate multiplying ``weight_decay``; by default it is the
    parameter's own lr. The trainer passes the width-independent base lr so the
    effective decay does not shrink with width.
    """
    missing = [k for k in params if k not in per_param_lr]
    if missing:
        raise ConfigError(f"no learning rate for parameters {missing[:5]}")
    state.t += 1
    t = state.t
    b1, b2 = config.beta1, config.beta2
    sched = lr_at_step(config.schedule, t)
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    wd = config.weight_decay
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        lr = per_param_lr[k] * sched
        if wd:
            if decay_lr is None:
                ld = per_param_lr[k]
            elif isinstance(decay_lr, Mapping):
                ld = decay_lr[k]
            else:
                ld = float(decay_lr)
            new = p - lr * update - (ld * sched * wd) * p
        else:
            new = p - lr * update
        if not np.all(np.isfinite(new)):
            raise NumericError(f"non-finite update for {k!r}")
        p[...] = new
