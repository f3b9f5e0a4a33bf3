"""SGD with momentum, coupled weight decay, and a milestone step schedule."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class SGDConfig:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: list = field(default_factory=lambda: [10, 18, 24])
    gamma: float = 0.1

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if list(self.milestones) != sorted(set(self.milestones)):
            raise ValueError("milestones must be strictly increasing")


def lr_at(config, epoch):
    """lr0 decayed by gamma at every milestone already reached."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    passed = sum(1 for m in config.milestones if m <= epoch)
    return config.lr0 * config.gamma**passed


def step(params, grads, state, config, epoch):
    """v <- mu*v + (g + wd*p); p <- p - lr*v, updating params in place."""
    lr = lr_at(config, epoch)
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: {g.shape} vs {p.shape}")
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = config.momentum * v + (g + config.weight_decay * p)
        p -= lr * v
        state[name] = v
    return params, state
