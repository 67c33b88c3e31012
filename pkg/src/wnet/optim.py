from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Parameter


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.90
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")


def adam_step(params: list[Parameter], config: AdamConfig, t: int):
    """One bias-corrected Adam update at step ``t`` (1-based), using each ``p.grad``."""
    if t < 1:
        raise ValueError(f"Adam step index must be >= 1, got {t}")
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p in params:
        g = p.grad
        p.m *= b1
        p.m += (1.0 - b1) * g
        p.v *= b2
        p.v += (1.0 - b2) * g * g
        m_hat = p.m / c1
        v_hat = p.v / c2
        p.data -= (config.lr * m_hat / (np.sqrt(v_hat) + config.eps)).astype(p.dtype, copy=False)
        p.step_count = t


class Adam:
    def __init__(self, params: list[Parameter], config: AdamConfig = AdamConfig()):
        self.params = list(params)
        self.config = config
        self.t = max((p.step_count for p in self.params), default=0)

    def step(self):
        self.t += 1
        adam_step(self.params, self.config, self.t)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
