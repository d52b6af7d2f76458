"""AdamW optimizer with parameter groups plus a cosine learning-rate schedule."""

from __future__ import annotations

import numpy as np


class AdamW:
    """Adam with decoupled weight decay.

    Accepts parameter groups as dicts: {"params": [...], "lr_scale": float}.
    The effective step size for a group is `lr * lr_scale`, letting one
    schedule drive branches trained at different rates. Parameters whose
    grad is None at step time are skipped entirely (their moment state does
    not advance), matching the convention that frozen or unused parameters
    stay untouched.
    """

    def __init__(self, param_groups, lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        if param_groups and not isinstance(param_groups[0], dict):
            param_groups = [{"params": list(param_groups)}]
        self.groups = []
        for g in param_groups:
            self.groups.append({
                "params": list(g["params"]),
                "lr_scale": float(g.get("lr_scale", 1.0)),
                "weight_decay": float(g.get("weight_decay", weight_decay)),
            })
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}
        self._t: dict[int, int] = {}

    def zero_grad(self):
        for g in self.groups:
            for p in g["params"]:
                p.zero_grad()

    def step(self):
        for g in self.groups:
            lr = self.lr * g["lr_scale"]
            wd = g["weight_decay"]
            for p in g["params"]:
                if p.grad is None:
                    continue
                key = id(p)
                if key not in self._m:
                    self._m[key] = np.zeros_like(p.data)
                    self._v[key] = np.zeros_like(p.data)
                    self._t[key] = 0
                self._t[key] += 1
                t = self._t[key]
                m = self._m[key]
                v = self._v[key]
                grad = p.grad
                m *= self.beta1
                m += (1.0 - self.beta1) * grad
                v *= self.beta2
                v += (1.0 - self.beta2) * grad * grad
                mhat = m / (1.0 - self.beta1**t)
                vhat = v / (1.0 - self.beta2**t)
                if wd:
                    p.data -= lr * wd * p.data
                p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def grad_norm(self) -> float:
        total = 0.0
        for g in self.groups:
            for p in g["params"]:
                if p.grad is not None:
                    total += float((p.grad.astype(np.float64) ** 2).sum())
        return float(np.sqrt(total))


def cosine_lr(step: int, total_steps: int, lr0: float, floor: float = 0.0) -> float:
    """Cosine decay from lr0 at step 0 to floor at step total_steps."""
    if total_steps <= 0:
        return floor
    frac = min(max(step / total_steps, 0.0), 1.0)
    return floor + 0.5 * (lr0 - floor) * (1.0 + np.cos(np.pi * frac))
