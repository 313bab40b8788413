"""AdamW with global-norm gradient clipping."""

from __future__ import annotations

import numpy as np


class AdamW:
    """Adaptive moments with decoupled weight decay.

    Moments are kept per parameter name so they can be checkpointed.
    """

    def __init__(self, params: dict, lr: float = 2e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4, clip_norm: float | None = 0.1):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {k: np.zeros_like(v.data, dtype=np.float32) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data, dtype=np.float32) for k, v in params.items()}

    def clip(self, grads: dict[str, np.ndarray]) -> float:
        norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
        if self.clip_norm is not None and norm > self.clip_norm:
            factor = np.float32(self.clip_norm / (norm + 1e-6))
            for k in grads:
                grads[k] = grads[k] * factor
        return norm

    def step(self, params: dict, lr: float | None = None) -> float:
        """Apply one update; returns the pre-clipping gradient norm."""
        lr = self.lr if lr is None else lr
        grads = {
            k: (p.grad if p.grad is not None else np.zeros_like(p.data)).astype(np.float32)
            for k, p in params.items()
        }
        norm = self.clip(grads)
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = (self.beta1 * self.m[k] + (1 - self.beta1) * g).astype(np.float32)
            self.v[k] = (self.beta2 * self.v[k] + (1 - self.beta2) * g * g).astype(np.float32)
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            decayed = p.data * np.float32(1.0 - lr * self.weight_decay)
            p.data = (decayed - np.float32(lr) * update).astype(np.float32)
        return norm
