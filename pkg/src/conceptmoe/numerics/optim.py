from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from conceptmoe.errors import ConfigError, MissingGradError
from conceptmoe.numerics.tensor import Tensor


class Parameter(Tensor):
    """A named leaf tensor that carries its own momentum buffer."""

    __slots__ = ("name", "momentum_buffer")

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.momentum_buffer = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not self.weight_decay >= 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")


def sgd_step(params: Iterable[Parameter], cfg: OptimizerConfig) -> None:
    """One SGD-with-momentum update, coupled weight decay, then zero the grads.

    v <- momentum * v + grad + weight_decay * theta
    theta <- theta - learning_rate * v
    """
    params = list(params)
    for p in params:
        if p.grad is None:
            raise MissingGradError(f"parameter {p.name!r} has no gradient")
    for p in params:
        buf = p.momentum_buffer
        buf *= cfg.momentum
        buf += p.grad
        if cfg.weight_decay:
            buf += cfg.weight_decay * p.data
        p.data -= cfg.learning_rate * buf
        p.grad = np.zeros_like(p.data)
