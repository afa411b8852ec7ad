"""Spatial feature fusion: cross-scale scaled dot-product attention.

Queries and keys are projected from the concatenation of the upsampled
deep change representation and the shallow one; values come from the
shallow representation alone. The attended result is added back to the
shallow input through an output projection.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericalError, ResolutionError, ShapeError
from .gradcheck import max_relative_error
from .temporal_fusion import _double_copy


def upsample_bilinear(x: torch.Tensor, target_h: int, target_w: int) -> torch.Tensor:
    """Half-pixel bilinear resize of a CxHxW or BxCxHxW tensor."""
    if target_h <= 0 or target_w <= 0:
        raise ShapeError(f"target size must be positive, got {target_h}x{target_w}")
    if target_h < x.shape[-2] or target_w < x.shape[-1]:
        raise ShapeError(
            f"cannot upsample {x.shape[-2]}x{x.shape[-1]} to smaller {target_h}x{target_w}"
        )
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    if x.shape[-2:] == (target_h, target_w):
        out = x
    else:
        out = F.interpolate(x, size=(target_h, target_w), mode="bilinear", align_corners=False)
    return out[0] if squeeze else out


def scaled_dot_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two dims (..., N, d)."""
    if q.shape[-2] == 0 or k.shape[-2] == 0:
        raise ShapeError("attention needs at least one token")
    if q.shape[-1] != k.shape[-1] or q.shape[-1] == 0:
        raise ShapeError(f"query/key widths differ or are empty: {q.shape[-1]} vs {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key and value token counts differ: {k.shape[-2]} vs {v.shape[-2]}")
    for name, t in (("query", q), ("key", k), ("value", v)):
        if not torch.isfinite(t).all():
            raise NumericalError(f"non-finite {name} in attention")
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    return torch.softmax(scores, dim=-1) @ v


class Attention(nn.Module):
    """Parameter-free wrapper so profiling hooks can see the attention matmuls."""

    def forward(self, q, k, v):
        return scaled_dot_attention(q, k, v)

    def flops_extra(self, inputs, output):
        q, k, v = inputs
        nq, nk, d = q.shape[-2], k.shape[-2], q.shape[-1]
        batch = q.numel() // (nq * d)
        dv = v.shape[-1]
        # scores + weighted sum as MACs (x2) and one op per score for the softmax
        return batch * (2 * nq * nk * d + 2 * nq * nk * dv + nq * nk)


class SFF(nn.Module):
    def __init__(self, low_ch: int, high_ch: int, dim: int | None = None,
                 key_downsample: int = 1, max_tokens: int = 4096):
        super().__init__()
        dim = dim or low_ch
        if dim <= 0 or key_downsample < 1:
            raise ShapeError("attention dim must be positive and key_downsample >= 1")
        self.low_ch, self.high_ch, self.dim = low_ch, high_ch, dim
        self.key_downsample = key_downsample
        self.max_tokens = max_tokens
        self.wq = nn.Conv2d(low_ch + high_ch, dim, 1)
        self.wk = nn.Conv2d(low_ch + high_ch, dim, 1)
        self.wv = nn.Conv2d(low_ch, dim, 1)
        self.wo = nn.Conv2d(dim, low_ch, 1)
        self.attn = Attention()

    def forward(self, low, high):
        if low.shape[1] != self.low_ch or high.shape[1] != self.high_ch:
            raise ShapeError(
                f"SFF expects {self.low_ch}/{self.high_ch} channels, "
                f"got {low.shape[1]}/{high.shape[1]}"
            )
        b, _, h, w = low.shape
        g = torch.cat([upsample_bilinear(high, h, w), low], dim=1)
        kv_low, kv_g = low, g
        if self.key_downsample > 1:
            kv_g = F.avg_pool2d(g, self.key_downsample)
            kv_low = F.avg_pool2d(low, self.key_downsample)
        n_kv = kv_g.shape[-2] * kv_g.shape[-1]
        if n_kv > self.max_tokens:
            raise ResolutionError(
                f"{n_kv} key tokens exceed the limit of {self.max_tokens}; "
                f"raise key_downsample to pool keys/values"
            )
        q = self.wq(g).flatten(2).transpose(1, 2)
        k = self.wk(kv_g).flatten(2).transpose(1, 2)
        v = self.wv(kv_low).flatten(2).transpose(1, 2)
        z = self.attn(q, k, v).transpose(1, 2).reshape(b, self.dim, h, w)
        return low + self.wo(z)

    def flops_extra(self, inputs, output):
        low, high = inputs
        # upsampled high tensor and the residual add, one op per element each
        up = low.shape[0] * self.high_ch * low.shape[-2] * low.shape[-1]
        return up + output.numel()


def sff_forward(low: torch.Tensor, high: torch.Tensor, p: SFF) -> torch.Tensor:
    squeeze = low.dim() == 3
    if squeeze:
        low, high = low.unsqueeze(0), high.unsqueeze(0)
    out = p(low, high)
    return out[0] if squeeze else out


def sff_backward_check(low, high, p: SFF, epsilon: float = 1e-5) -> float:
    """Max relative error between autograd and central differences through ``sff_forward``."""
    p = _double_copy(p)
    low = low.detach().double().clone()
    high = high.detach().double().clone()
    if low.dim() == 3:
        low, high = low.unsqueeze(0), high.unsqueeze(0)
    gen = torch.Generator().manual_seed(1234)
    probe = torch.randn(low.shape, generator=gen, dtype=torch.float64)
    tensors = {"low": low, "high": high}
    tensors.update(dict(p.named_parameters()))
    return max_relative_error(lambda: (p(low, high) * probe).sum(), tensors, epsilon)
