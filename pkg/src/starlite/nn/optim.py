"""AdamW with decoupled weight decay, plus global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


def clip_global_norm(params: dict[str, Tensor], max_norm: float = 1.0) -> float:
    """Scale all gradients so their joint L2 norm is at most `max_norm`.

    Returns the pre-clip norm. Parameters without a gradient count as zero.
    """
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            g = p.grad.astype(np.float64, copy=False)
            total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = np.float32(max_norm / norm)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


@dataclass
class AdamW:
    """Bias-corrected Adam update with decoupled weight decay.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)
    """

    params: dict[str, Tensor]
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.05
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.m[name] = np.zeros_like(p.data)
            self.v[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        """One update over every registered parameter (missing grads count as zero)."""
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter '{name}' {p.data.shape}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= np.float32(self.lr) * (m_hat / (np.sqrt(v_hat) + self.eps) + np.float32(self.weight_decay) * p.data)
