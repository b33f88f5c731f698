"""Parameter-group optimizers: AdamW with bias correction, and plain SGD.

The gating logits live in their own group with their own learning rate; the
trainer passes an optional per-group gradient scale (how norm clipping is
applied, so split endpoints can agree on one global scale).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Tensor


@dataclass
class OptimConfig:
    model_lr: float = 1e-4
    bits_lr: float = 1e-2
    beta: float = 0.02
    optimizer: str = "adamw"  # adamw | sgd
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    steps: int = 1000
    batch_size: int = 16
    seed: int = 0
    clip_norm: float = 1.0
    schedule_decay: Optional[float] = None  # multiply (bits_lr, beta) once target reached

    def __post_init__(self):
        if self.bits_lr <= 0:
            raise ValueError("bits_lr must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class _Group:
    def __init__(self, name, params, lr, weight_decay):
        self.name = name
        self.params: list[Tensor] = list(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]


class GroupOptimizer:
    """AdamW or SGD over named groups; each group steps with its own lr."""

    def __init__(self, cfg: OptimConfig):
        self.cfg = cfg
        self.groups: dict[str, _Group] = {}
        self.t = 0

    def add_group(self, name: str, params, lr: float, weight_decay: float = 0.0):
        self.groups[name] = _Group(name, params, lr, weight_decay)

    def set_lr(self, name: str, lr: float):
        self.groups[name].lr = float(lr)

    def zero_grad(self):
        for g in self.groups.values():
            for p in g.params:
                p.grad = None

    def grad_norm_sq(self, name: str) -> float:
        total = 0.0
        for p in self.groups[name].params:
            if p.grad is not None:
                total += float(np.float64(p.grad.astype(np.float64)).reshape(-1) @ p.grad.astype(np.float64).reshape(-1))
        return total

    def step(self, grad_scale: Optional[dict[str, float]] = None):
        self.t += 1
        scales = grad_scale or {}
        cfg = self.cfg
        for g in self.groups.values():
            scale = np.float32(scales.get(g.name, 1.0))
            for i, p in enumerate(g.params):
                grad = p.grad
                if grad is None:
                    grad = np.zeros_like(p.data)
                grad = grad * scale
                if cfg.optimizer == "sgd":
                    p.data -= np.float32(g.lr) * (grad + np.float32(g.weight_decay) * p.data)
                    continue
                m, v = g.m[i], g.v[i]
                m *= cfg.beta1
                m += (1 - cfg.beta1) * grad
                v *= cfg.beta2
                v += (1 - cfg.beta2) * grad * grad
                mhat = m / (1 - cfg.beta1**self.t)
                vhat = v / (1 - cfg.beta2**self.t)
                if g.weight_decay:
                    p.data *= np.float32(1 - g.lr * g.weight_decay)
                p.data -= np.float32(g.lr) * (mhat / (np.sqrt(vhat) + cfg.eps)).astype(np.float32)


def clip_scale(norm_sq_total: float, max_norm: float) -> float:
    """Gradient scale factor for global-norm clipping (1.0 when under the cap)."""
    norm = float(np.sqrt(norm_sq_total))
    if norm <= max_norm or norm == 0.0:
        return 1.0
    return max_norm / norm
