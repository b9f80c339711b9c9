"""AdamW with decoupled weight decay and the per-epoch cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .networks import NetworkParams


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: NetworkParams) -> "OptimizerState":
        return cls(
            {k: np.zeros_like(t.data) for k, t in params.items()},
            {k: np.zeros_like(t.data) for k, t in params.items()},
            0,
        )


def adamw_step(
    params: NetworkParams,
    grads: dict[str, np.ndarray | None],
    state: OptimizerState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> OptimizerState:
    """One in-place AdamW update; parameters whose gradient is ``None`` are left alone."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.data.shape}")
        dt = p.data.dtype.type
        m = state.m[name] = dt(b1) * state.m[name] + dt(1.0 - b1) * g
        v = state.v[name] = dt(b2) * state.v[name] + dt(1.0 - b2) * g * g
        theta = p.data * dt(1.0 - lr * weight_decay)
        p.data = (theta - dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(eps))).astype(p.data.dtype)
    return state


def cosine_lr(epoch: float, total_epochs: int, lr_init: float, lr_min: float) -> float:
    if total_epochs <= 0:
        raise ValueError(f"total_epochs must be positive, got {total_epochs}")
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * epoch / total_epochs))


class AdamW:
    """Thin stateful wrapper around :func:`adamw_step` for a single network."""

    def __init__(self, params: NetworkParams, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = params
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = OptimizerState.zeros_like(params)

    def step(self, lr: float) -> None:
        grads = {k: t.grad for k, t in self.params.items()}
        adamw_step(self.params, grads, self.state, lr, self.betas, self.eps, self.weight_decay)
        self.params.zero_grad()
