"""Stochastic gradient descent."""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from sonar_kd.core.nn import Parameter
from sonar_kd.errors import ConfigError


@dataclass(frozen=True)
class SGDConfig:
    lr: float = 0.01
    momentum: float = 0.0
    weight_decay: float = 0.0
    clip_norm: Optional[float] = None

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive", {"lr": self.lr})
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)", {"momentum": self.momentum})
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be non-negative", {"weight_decay": self.weight_decay})
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive", {"clip_norm": self.clip_norm})


class SGD:
    """``p -= lr * (g + weight_decay * p)``, with optional momentum and global-norm clipping."""

    def __init__(self, params: Sequence[Parameter], config: Optional[SGDConfig] = None) -> None:
        config = config or SGDConfig()
        config.validate()
        self.params: List[Parameter] = list(params)
        self.config = config
        self._velocity: Dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params:
            if p.grad is not None:
                total += float(np.sum(np.square(p.grad, dtype=np.float64)))
        return float(np.sqrt(total))

    def step(self) -> float:
        """Apply one update and return the gradient norm before clipping."""
        cfg = self.config
        norm = self.grad_norm()
        scale = 1.0
        if cfg.clip_norm is not None and norm > cfg.clip_norm:
            scale = cfg.clip_norm / norm
        for index, p in enumerate(self.params):
            if p.grad is None:
                continue
            grad = p.grad * scale
            if cfg.weight_decay:
                grad = grad + cfg.weight_decay * p.data
            if cfg.momentum:
                velocity = self._velocity.get(index)
                velocity = grad if velocity is None else cfg.momentum * velocity + grad
                self._velocity[index] = velocity
                grad = velocity
            p.data = (p.data - cfg.lr * grad).astype(p.data.dtype, copy=False)
        return norm
