"""Plain SGD with heavy-ball momentum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import torch

from ..errors import InputError


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.003
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 15
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InputError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise InputError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise InputError("batch_size must be >= 1 and epochs >= 0")


def sgd_step(params: Iterable[tuple[str, torch.Tensor]], config: SgdConfig,
             state: dict[str, torch.Tensor]) -> None:
    """In-place update ``v <- momentum * v + g; w <- w - lr * v``.

    ``params`` yields (name, tensor) pairs whose ``.grad`` is populated;
    ``state`` holds the velocity buffers keyed by name and is updated too.
    Parameters without a gradient are left untouched.
    """
    with torch.no_grad():
        for name, p in params:
            if p.grad is None:
                continue
            v = state.get(name)
            if v is None:
                v = state[name] = p.grad.clone()
            else:
                v.mul_(config.momentum).add_(p.grad)
            p.add_(v, alpha=-config.learning_rate)
