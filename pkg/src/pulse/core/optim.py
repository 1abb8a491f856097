"""AdamW with decoupled weight decay and the warmup + cosine schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from pulse.core.params import ParamStore
from pulse.errors import InvalidArgument


@dataclass
class LrSchedule:
    base_lr: float
    total_steps: int
    warmup_fraction: float = 0.10

    def __post_init__(self):
        if self.base_lr <= 0 or self.total_steps < 1:
            raise InvalidArgument("base_lr must be positive and total_steps >= 1")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise InvalidArgument("warmup_fraction must lie in (0, 1)")

    @property
    def warmup_steps(self) -> int:
        return max(1, int(round(self.warmup_fraction * self.total_steps)))


def lr_at_step(schedule: LrSchedule, step: int) -> float:
    """Linear ramp from 0 to ``base_lr``, then half-cosine down to 0.

    Steps past ``total_steps`` return 0.
    """
    if step < 0:
        raise InvalidArgument("step must be non-negative")
    total, warm = schedule.total_steps, schedule.warmup_steps
    if step > total:
        return 0.0
    if step <= warm:
        return schedule.base_lr * step / warm
    if total == warm:
        return schedule.base_lr
    progress = (step - warm) / (total - warm)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: ParamStore, grads: dict[str, np.ndarray], state: AdamWState,
               lr: float | None = None) -> None:
    """Apply one AdamW update in place; names absent from ``grads`` are untouched."""
    params.check_writable()
    lr = state.lr if lr is None else float(lr)
    for name, g in grads.items():
        if name not in params:
            raise InvalidArgument(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != params[name].shape:
            raise InvalidArgument(f"gradient shape {np.shape(g)} != parameter shape {params[name].shape} for {name!r}")
    state.step += 1
    params.step_count += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        g = np.asarray(g, dtype=p.dtype)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + state.eps)


class AdamW:
    """Convenience wrapper pairing a store with its optimizer state."""

    def __init__(self, params: ParamStore, lr: float = 1e-3, weight_decay: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.state = AdamWState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                                weight_decay=weight_decay)

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        adamw_step(self.params, grads, self.state, lr)
