"""Gradient-descent optimizers over parameter tensors."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor


class SGD:
    """SGD with optional classical momentum: v <- m*v + g; p <- p - lr*v."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0):
        if lr <= 0:
            raise ValueError("SGD: lr must be positive")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("SGD: momentum must be in [0, 1)")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Sequence[Tensor | np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError(f"SGD: expected {len(self.params)} gradients, got {len(grads)}")
        for p, v, g in zip(self.params, self._velocity, grads):
            garr = g.data if isinstance(g, Tensor) else g
            if self.momentum:
                v *= self.momentum
                v += garr
                update = v
            else:
                update = garr
            p.data -= self.lr * update
