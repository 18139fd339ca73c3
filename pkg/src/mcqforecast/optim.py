"""Adam with bias correction, plus global-norm gradient clipping."""
from __future__ import annotations

import numpy as np

from .exceptions import ContractError


def adam_step(params, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, t=1):
    """Apply one Adam update in place.

    ``params`` maps names to tensors with populated ``grad``; ``state`` maps
    names to ``(m, v)`` moment pairs and is updated in place.
    """
    if t < 1:
        raise ContractError(f"Adam step index must be >= 1, got {t}")
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad
        m, v = state.get(name, (None, None))
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state[name] = (m, v)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


def clip_grad_norm(params, max_norm):
    """Rescale gradients so their global L2 norm is at most ``max_norm``."""
    total = np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, clip_norm=1.0):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.state = {}
        self.t = 0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        if self.clip_norm is not None:
            clip_grad_norm(self.params.values(), self.clip_norm)
        self.t += 1
        adam_step(self.params, self.state, self.lr, self.betas[0], self.betas[1], self.eps, self.t)
