"""Adam with bias-corrected moment estimates, operating on named tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """Update ``params`` in place from ``grads`` (both keyed by name)."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name}")
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / bc1) / (torch.sqrt(v / bc2) + eps))
    return params


class Adam:
    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def step(self, params: dict, grads: dict):
        return adam_step(params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
