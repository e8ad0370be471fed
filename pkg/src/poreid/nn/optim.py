from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class SGD:
    """Plain SGD with staircase exponential learning-rate decay.

    ``lr(step) = base_lr * decay_factor ** (step // decay_every)``.
    """

    base_lr: float = 0.1
    decay_factor: float = 1.0
    decay_every: int = 1
    weight_decay: float = 0.0
    step: int = 0

    def __post_init__(self):
        if self.base_lr <= 0 or self.decay_factor <= 0 or self.decay_every < 1:
            raise ValueError("learning rate schedule must stay strictly positive")

    def lr(self, step=None) -> float:
        step = self.step if step is None else step
        return self.base_lr * self.decay_factor ** (step // self.decay_every)

    def apply(self, params: dict, grads: dict) -> None:
        """Updates ``params`` in place and advances the step counter."""
        for key, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient for {key} at step {self.step}")
        lr = self.lr()
        for key, g in grads.items():
            w = params[key]
            if g.shape != w.shape:
                raise ValueError(f"{key}: gradient {g.shape} vs parameter {w.shape}")
            upd = g + self.weight_decay * w if self.weight_decay else g
            w -= (lr * upd).astype(w.dtype)
        self.step += 1


def sgd_step(model, opt: SGD) -> None:
    """Applies one update to every trainable tensor of ``model`` using the
    gradients left by its last backward pass."""
    opt.apply(model.trainable(), model.grads())
