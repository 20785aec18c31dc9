"""One-cycle learning-rate and momentum schedule.

Linear warm-up from max_lr / div_factor to max_lr over the first
``pct_start`` fraction of steps, then a cosine anneal down to
max_lr / final_div_factor.  Momentum (beta1 for Adam-family optimizers) runs
inversely: from its maximum down to its minimum at the lr peak, then back up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass
class OneCycleSchedule:
    max_lr: float
    total_steps: int
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1.0e4
    momentum: tuple = (0.85, 0.95)

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0.0 < self.pct_start < 1.0:
            raise ValueError("pct_start must be in (0, 1)")
        self.warm_steps = int(round(self.pct_start * (self.total_steps - 1)))

    @property
    def initial_lr(self) -> float:
        return self.max_lr / self.div_factor

    @property
    def final_lr(self) -> float:
        return self.max_lr / self.final_div_factor

    def lr(self, step: int) -> float:
        step = min(max(step, 0), self.total_steps - 1)
        if step <= self.warm_steps:
            if self.warm_steps == 0:
                return self.max_lr
            t = step / self.warm_steps
            return self.initial_lr + t * (self.max_lr - self.initial_lr)
        span = self.total_steps - 1 - self.warm_steps
        t = (step - self.warm_steps) / span
        return self.final_lr + 0.5 * (self.max_lr - self.final_lr) * (1 + math.cos(math.pi * t))

    def momentum_at(self, step: int) -> float:
        lo, hi = self.momentum
        step = min(max(step, 0), self.total_steps - 1)
        if step <= self.warm_steps:
            if self.warm_steps == 0:
                return lo
            t = step / self.warm_steps
            return hi + t * (lo - hi)
        span = self.total_steps - 1 - self.warm_steps
        t = (step - self.warm_steps) / span
        return hi - 0.5 * (hi - lo) * (1 + math.cos(math.pi * t))

    def apply(self, optimizer, step: int):
        """Set lr (and beta1, when present) on every param group."""
        lr = self.lr(step)
        mom = self.momentum_at(step)
        for group in optimizer.param_groups:
            group["lr"] = lr
            if "betas" in group:
                group["betas"] = (mom, group["betas"][1])
            elif "momentum" in group:
                group["momentum"] = mom
        return lr, mom
