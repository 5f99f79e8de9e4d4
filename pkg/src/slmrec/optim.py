"""AdamW with decoupled weight decay, global-norm clipping, and a warmup
plus cosine learning-rate schedule.

The update order per step is: check gradients are finite, clip the global
gradient norm, apply decoupled decay, then the bias-corrected Adam update
at the scheduled learning rate. Moment tensors always shape-match their
parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import TrainingError


def cosine_lr(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Learning rate at 1-based ``step``: linear warmup, cosine decay to zero.

    With ``total_steps <= 0`` the schedule is constant at ``base_lr``.
    """
    if total_steps <= 0:
        return base_lr
    if warmup_steps > 0 and step <= warmup_steps:
        return base_lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min((step - warmup_steps) / span, 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    """Per-parameter moments plus the shared step counter and hyperparameters."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    max_grad_norm: float = 1.0
    warmup_steps: int = 0
    total_steps: int = 0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class AdamW:
    """Optimizes a named parameter dict in place."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        max_grad_norm: float = 1.0,
        warmup_steps: int = 0,
        total_steps: int = 0,
    ):
        self.params = dict(params)
        self.state = OptimizerState(
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            weight_decay=weight_decay,
            max_grad_norm=max_grad_norm,
            warmup_steps=warmup_steps,
            total_steps=total_steps,
        )
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def current_lr(self) -> float:
        s = self.state
        return cosine_lr(s.step_count + 1, s.lr, s.warmup_steps, s.total_steps)

    def _gradients(self) -> dict[str, np.ndarray]:
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise TrainingError(
                    f"non-finite gradient in parameter {name!r} at step "
                    f"{self.state.step_count + 1}"
                )
            grads[name] = g
        return grads

    def global_grad_norm(self) -> float:
        total = 0.0
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            flat = g.reshape(-1)
            total += float(np.einsum("i,i->", flat, flat, dtype=np.float64))
        return math.sqrt(total)

    def step(self) -> float:
        """Apply one update; returns the learning rate that was used."""
        s = self.state
        grads = self._gradients()

        if s.max_grad_norm > 0:
            total = 0.0
            for g in grads.values():
                flat = g.reshape(-1)
                total += float(np.einsum("i,i->", flat, flat, dtype=np.float64))
            norm = math.sqrt(total)
            if norm > s.max_grad_norm:
                scale = s.max_grad_norm / norm
                grads = {k: g * scale for k, g in grads.items()}

        s.step_count += 1
        lr = cosine_lr(s.step_count, s.lr, s.warmup_steps, s.total_steps)
        b1c = 1.0 - s.beta1**s.step_count
        b2c = 1.0 - s.beta2**s.step_count

        for name, p in self.params.items():
            g = grads[name]
            w = p.data
            if s.weight_decay:
                w -= lr * s.weight_decay * w
            m = s.m[name]
            v = s.v[name]
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * (g * g)
            w -= lr * (m / b1c) / (np.sqrt(v / b2c) + s.eps)
        return lr
