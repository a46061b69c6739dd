"""AdamW with decoupled, multiplicative weight decay."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamW:
    """Per-parameter Adam moments plus decoupled weight decay.

    Each step first decays ``p <- p * (1 - lr * weight_decay)`` and then applies the
    bias-corrected Adam update. Parameters are kept in a ``{name: array}`` dict and
    updated in place.
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-5
    weight_decay: float = 1e-4
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def step(self, params, grads):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        decay = 1.0 - self.lr * self.weight_decay
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
            m = self.first_moment.get(name)
            if m is None:
                m = self.first_moment[name] = np.zeros_like(p)
                self.second_moment[name] = np.zeros_like(p)
            v = self.second_moment[name]
            p *= decay
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return params


def adamw_step(params, grads, state):
    """Functional form: update ``params`` in place with ``state`` and return both."""
    state.step(params, grads)
    return params, state
