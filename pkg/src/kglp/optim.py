"""Decoupled-weight-decay adaptive optimizer and the warmup/decay schedule.

Two learning-rate groups are supported (prediction-head "linear" parameters vs.
embedding/attention parameters); the schedule scales both peaks by the same
factor: linear ramp from 0 over the warmup steps, then linear decay to 0 at the
final step. Weight decay applies only to matrices (ndim >= 2), never to biases
or normalization parameters.
"""

from __future__ import annotations

import numpy as np

from .encoder import param_group


def warmup_linear_decay(step: int, total_steps: int, warmup_frac: float) -> float:
    """Schedule scale in [0, 1]: 0 at step 0, 1 at the warmup boundary, ~0 at the end."""
    if total_steps <= 0:
        return 1.0
    warmup = max(1, int(round(warmup_frac * total_steps)))
    if step < warmup:
        return step / warmup
    if total_steps <= warmup:
        return 1.0
    return max(0.0, (total_steps - step) / (total_steps - warmup))


class AdamW:
    """Adam with decoupled weight decay over a named parameter dict."""

    def __init__(self, lr_groups: dict[str, float], betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01,
                 group_fn=param_group):
        self.lr_groups = dict(lr_groups)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.group_fn = group_fn
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def learning_rates(self, lr_scale: float) -> dict[str, float]:
        return {g: lr * lr_scale for g, lr in self.lr_groups.items()}

    def step(self, params: dict, grads: dict, lr_scale: float = 1.0) -> None:
        """One in-place update of every parameter that has a gradient."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            p = params[name]
            lr = self.lr_groups[self.group_fn(name)] * lr_scale
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and p.ndim >= 2:
                update = update + self.weight_decay * p
            p -= (lr * update).astype(p.dtype)
