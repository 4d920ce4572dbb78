"""Seeded parameter initialisers (bounds follow the usual uniform variants)."""

import math

import torch


def kaiming_uniform(shape, fan_in: int, gen: torch.Generator, dtype=torch.float64) -> torch.Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1).mul_(bound).to(dtype)


def xavier_uniform(shape, fan_in: int, fan_out: int, gen: torch.Generator,
                   dtype=torch.float64) -> torch.Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1).mul_(bound).to(dtype)
