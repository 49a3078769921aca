"""AdamW with a linear learning-rate schedule and global-norm clipping."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor


def linear_lr(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    """Linear interpolation from ``lr_start`` at step 0 to ``lr_end`` at the last step."""
    if total_steps <= 1:
        return lr_start
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return lr_start + (lr_end - lr_start) * frac


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        coef = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= coef
    return total


class AdamW:
    """Adam with decoupled weight decay (decay applied to the weights, not the gradient)."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = [np.array(a, dtype=p.data.dtype) for a, p in zip(state["m"], self.params)]
        self.v = [np.array(a, dtype=p.data.dtype) for a, p in zip(state["v"], self.params)]
