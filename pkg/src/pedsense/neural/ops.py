"""Differentiable layer primitives on top of torch autograd.

Every op validates shapes, and checks its forward output and the gradient
flowing back into it for NaN/Inf, raising ``NonFiniteError`` with the op
name and input shapes.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn.functional as F

from ..errors import NonFiniteError, ShapeError

PROB_EPS = 1e-7


def _guard(name: str, out: torch.Tensor, *inputs: torch.Tensor) -> torch.Tensor:
    shapes = [tuple(t.shape) for t in inputs if isinstance(t, torch.Tensor)]
    if not _all_finite(out):
        raise NonFiniteError(f"{name}: non-finite forward output, input shapes {shapes}")
    if out.requires_grad:
        def check(grad, name=name, shapes=shapes):
            if not _all_finite(grad):
                raise NonFiniteError(f"{name}: non-finite gradient, input shapes {shapes}")
        out.register_hook(check)
    return out


def _all_finite(t: torch.Tensor) -> bool:
    # one reduction on the fast path; a NaN/Inf anywhere poisons the sum
    with torch.no_grad():
        if math.isfinite(t.detach().sum().item()):
            return True
        return bool(torch.isfinite(t).all())


def conv2d(x: torch.Tensor, kernels: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, padding: int = 0) -> torch.Tensor:
    """Cross-correlation of N x C x H x W input with K x C x kh x kw kernels."""
    if x.dim() != 4 or kernels.dim() != 4 or x.shape[1] != kernels.shape[1]:
        raise ShapeError(f"conv2d: input {tuple(x.shape)} vs kernels {tuple(kernels.shape)}")
    if bias is not None and bias.shape != (kernels.shape[0],):
        raise ShapeError(f"conv2d: bias {tuple(bias.shape)} for {kernels.shape[0]} kernels")
    _, _, h, w = x.shape
    kh, kw = kernels.shape[2:]
    for size, k in ((h, kh), (w, kw)):
        span = size + 2 * padding - k
        if span < 0 or span % stride:
            raise ShapeError(f"conv2d: non-integral output size for extent {size}, kernel {k}, "
                             f"stride {stride}, padding {padding}")
    return _guard("conv2d", F.conv2d(x, kernels, bias, stride=stride, padding=padding),
                  x, kernels)


def maxpool2d(x: torch.Tensor, window: int = 2, stride: int | None = None) -> torch.Tensor:
    """Max pooling; on ties the gradient goes to the first maximum (row-major)."""
    stride = window if stride is None else stride
    if x.shape[-1] < window or x.shape[-2] < window:
        raise ShapeError(f"maxpool2d: window {window} larger than {tuple(x.shape[-2:])}")
    return _guard("maxpool2d", F.max_pool2d(x, window, stride), x)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """x @ weight + bias with weight laid out D x E."""
    if weight.dim() != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {tuple(x.shape)} vs weight {tuple(weight.shape)}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {tuple(bias.shape)} vs weight {tuple(weight.shape)}")
    out = x @ weight
    if bias is not None:
        out = out + bias
    return _guard("linear", out, x, weight)


def relu(x: torch.Tensor) -> torch.Tensor:
    return _guard("relu", torch.relu(x), x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    # exp is only ever taken of a non-positive argument
    e = torch.exp(-torch.abs(x))
    out = torch.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _guard("sigmoid", out, x)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    z = x - x.max(dim=dim, keepdim=True).values.detach()
    e = torch.exp(z)
    return _guard("softmax", e / e.sum(dim=dim, keepdim=True), x)


def log_softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    z = x - x.max(dim=dim, keepdim=True).values.detach()
    return _guard("log_softmax", z - torch.log(torch.exp(z).sum(dim=dim, keepdim=True)), x)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, shift: torch.Tensor,
               eps: float = 1e-5) -> torch.Tensor:
    """Standardise over the last axis, then scale by ``gain`` and add ``shift``."""
    if gain.shape != x.shape[-1:] or shift.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: input {tuple(x.shape)}, gain {tuple(gain.shape)}")
    out = F.layer_norm(x, x.shape[-1:], gain, shift, eps)
    return _guard("layer_norm", out, x)


def multihead_attention(x: torch.Tensor, heads: int, wq: torch.Tensor, wk: torch.Tensor,
                        wv: torch.Tensor, wo: torch.Tensor, *, return_weights: bool = False):
    """Unmasked scaled dot-product self-attention over ``... x T x D`` input."""
    d = x.shape[-1]
    if d % heads:
        raise ShapeError(f"multihead_attention: model dim {d} not divisible by {heads} heads")
    for name, w in (("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)):
        if w.shape != (d, d):
            raise ShapeError(f"multihead_attention: {name} is {tuple(w.shape)}, want {(d, d)}")
    dh = d // heads
    lead, t = x.shape[:-2], x.shape[-2]

    def split(z):
        return z.reshape(*lead, t, heads, dh).transpose(-3, -2)  # ... H T dh

    q, k, v = split(x @ wq), split(x @ wk), split(x @ wv)
    weights = softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
    ctx = (weights @ v).transpose(-3, -2).reshape(*lead, t, d)
    out = _guard("multihead_attention", ctx @ wo, x)
    return (out, weights) if return_weights else out


class BceTerms(NamedTuple):
    mean: torch.Tensor      # -mean(y log p + (1-y) log(1-p))
    loss_pos: torch.Tensor  # sum over y=1 of -log p
    loss_neg: torch.Tensor  # sum over y=0 of -log(1-p)
    per_sample: torch.Tensor


def bce_loss(p: torch.Tensor, y: torch.Tensor) -> BceTerms:
    """Binary cross entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    if p.shape != y.shape:
        raise ShapeError(f"bce_loss: p {tuple(p.shape)} vs y {tuple(y.shape)}")
    p = torch.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
    y = y.to(p.dtype)
    pos = -torch.log(p) * y
    neg = -torch.log(1.0 - p) * (1.0 - y)
    per = pos + neg
    return BceTerms(_guard("bce_loss", per.mean(), p), pos.sum(), neg.sum(), per)
