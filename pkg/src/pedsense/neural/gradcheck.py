"""Central finite-difference check of autograd gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch


@dataclass
class GradCheckReport:
    max_error: float
    worst: str
    checked: int
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def grad_check(fn: Callable[[], torch.Tensor], tensors: Mapping[str, torch.Tensor],
               tolerance: float = 1e-4, h: float = 1e-5, max_entries: int = 64,
               seed: int = 0) -> GradCheckReport:
    """Compare autograd against central differences for every named tensor.

    ``fn`` re-evaluates a scalar from the current contents of ``tensors``
    (float64 leaves with ``requires_grad``). Tensors larger than
    ``max_entries`` are sub-sampled at seeded random positions. The error
    per entry is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    for t in tensors.values():
        t.grad = None
    fn().backward()
    analytic = {k: t.grad.detach().clone() for k, t in tensors.items()}
    rng = np.random.default_rng(seed)
    worst, worst_name, checked = 0.0, "", 0
    errors = {}
    with torch.no_grad():
        for name, t in tensors.items():
            flat = t.view(-1)
            n = flat.numel()
            idx = np.arange(n) if n <= max_entries else rng.choice(n, max_entries, replace=False)
            err_t = 0.0
            for i in idx:
                old = flat[i].item()
                flat[i] = old + h
                up = fn().item()
                flat[i] = old - h
                down = fn().item()
                flat[i] = old
                num = (up - down) / (2 * h)
                a = analytic[name].view(-1)[i].item()
                err = abs(a - num) / max(1.0, abs(a))
                err_t = max(err_t, err)
                checked += 1
            errors[name] = err_t
            if err_t >= worst:
                worst, worst_name = err_t, name
    for t in tensors.values():
        t.grad = None
    return GradCheckReport(worst, worst_name, checked, tolerance, errors)
