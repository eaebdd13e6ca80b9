"""First-order optimisers over lists of leaf tensors."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .autodiff import Tensor


class Optimizer:
    def __init__(self, params: Iterable[Tensor]):
        self.params = list(params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        raise NotImplementedError


class Momentum(Optimizer):
    """Heavy-ball gradient descent: ``v = mu*v + g; p -= lr*v``."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-2, momentum: float = 0.9):
        super().__init__(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            # Rebind rather than mutate: old arrays may still sit in a tape.
            p.data = p.data - self.lr * v


class Adam(Optimizer):
    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        grad_clip: float | None = None,
    ):
        super().__init__(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        scale = 1.0
        if self.grad_clip is not None:
            norm = np.sqrt(sum(float((p.grad**2).sum()) for p in self.params if p.grad is not None))
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
