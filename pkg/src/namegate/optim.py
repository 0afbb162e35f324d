"""Adam and AdamW updates with bias correction.

One optimizer instance owns the moment state for a fixed parameter list and
applies updates in place. AdamW applies decoupled weight decay to the
parameter before the moment-based step.
"""

from __future__ import annotations

import numpy as np

from .errors import TrainingDivergedError
from .numerics import Param


class Adam:
    def __init__(self, params: list[Param], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def _decay(self, p: Param) -> None:
        pass

    def step(self) -> None:
        """Consume p.grad for every param and update values in place."""
        for p in self.params:
            if not np.isfinite(p.grad).all():
                raise TrainingDivergedError(f"non-finite gradient in {p.name or 'param'}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            dt = p.value.dtype.type
            m *= dt(b1)
            m += dt(1.0 - b1) * g
            v *= dt(b2)
            v += dt(1.0 - b2) * (g * g)
            self._decay(p)
            mhat = m / dt(bias1)
            vhat = v / dt(bias2)
            p.value -= dt(self.lr) * mhat / (np.sqrt(vhat) + dt(self.eps))


class AdamW(Adam):
    def __init__(self, params: list[Param], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01,
                 decay_scalars: bool = True):
        super().__init__(params, lr, beta1, beta2, eps)
        self.weight_decay = float(weight_decay)
        self.decay_scalars = bool(decay_scalars)

    def _decay(self, p: Param) -> None:
        if self.weight_decay == 0.0:
            return
        if p.value.ndim == 0 and not self.decay_scalars:
            return
        dt = p.value.dtype.type
        p.value -= dt(self.lr) * dt(self.weight_decay) * p.value
