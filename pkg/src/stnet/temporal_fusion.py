"""Temporal feature fusion: cross-temporal gating of same-scale bi-temporal features."""
from __future__ import annotations

import torch
import torch.nn as nn

from .errors import ShapeError
from .gradcheck import max_relative_error


class DSConv(nn.Module):
    """Depth-wise 3x3 followed by point-wise 1x1, then BN + ReLU."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.depthwise = nn.Conv2d(in_ch, in_ch, 3, 1, 1, groups=in_ch, bias=False)
        self.pointwise = nn.Conv2d(in_ch, out_ch, 1, bias=False)
        self.bn = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU()

    def forward(self, x):
        return self.relu(self.bn(self.pointwise(self.depthwise(x))))


def coarse_difference(r1: torch.Tensor, r2: torch.Tensor) -> torch.Tensor:
    """Signed element-wise difference ``r1 - r2``."""
    if r1.shape != r2.shape:
        raise ShapeError(f"feature shapes differ: {tuple(r1.shape)} vs {tuple(r2.shape)}")
    return r1 - r2


class TFF(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.fuse1 = DSConv(2 * channels, channels)
        self.fuse2 = DSConv(2 * channels, channels)
        self.gate1 = nn.Conv2d(channels, channels, 1)
        self.gate2 = nn.Conv2d(channels, channels, 1)
        self.fuse_out = DSConv(2 * channels, channels)

    def gates(self, r1, r2):
        rc = coarse_difference(r1, r2)
        rc1 = self.fuse1(torch.cat([r1, rc], dim=1))
        rc2 = self.fuse2(torch.cat([r2, rc], dim=1))
        return torch.sigmoid(self.gate1(rc1)), torch.sigmoid(self.gate2(rc2))

    def forward(self, r1, r2):
        if r1.shape[-3] != self.channels:
            raise ShapeError(f"TFF built for {self.channels} channels, got {r1.shape[-3]}")
        w1, w2 = self.gates(r1, r2)
        return self.fuse_out(torch.cat([w1 * r1, w2 * r2], dim=1))

    def flops_extra(self, inputs, output):
        # subtraction, two sigmoids, two gate products (same element count each)
        return 5 * output.numel()


class BaseFusion(nn.Module):
    """Ungated ablation fusion: concat(R1, R2, R1 - R2) -> 1x1 conv -> BN -> ReLU."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.proj = nn.Sequential(
            nn.Conv2d(3 * channels, channels, 1, bias=False),
            nn.BatchNorm2d(channels),
            nn.ReLU(),
        )

    def forward(self, r1, r2):
        if r1.shape[-3] != self.channels:
            raise ShapeError(f"fusion built for {self.channels} channels, got {r1.shape[-3]}")
        return self.proj(torch.cat([r1, r2, coarse_difference(r1, r2)], dim=1))

    def flops_extra(self, inputs, output):
        return output.numel()


def tff_forward(r1: torch.Tensor, r2: torch.Tensor, p: TFF) -> torch.Tensor:
    """Fuse C x h x w (or batched) features with the TFF block ``p``."""
    squeeze = r1.dim() == 3
    if squeeze:
        r1, r2 = r1.unsqueeze(0), r2.unsqueeze(0)
    out = p(r1, r2)
    return out[0] if squeeze else out


def tff_backward_check(r1, r2, p: TFF, epsilon: float = 1e-5) -> float:
    """Max relative error between autograd and central differences of ``sum(tff(r1, r2) * probe)``.

    Runs in double precision on copies, over both inputs and every parameter.
    """
    p = _double_copy(p)
    r1 = r1.detach().double().clone()
    r2 = r2.detach().double().clone()
    if r1.dim() == 3:
        r1, r2 = r1.unsqueeze(0), r2.unsqueeze(0)
    gen = torch.Generator().manual_seed(1234)
    probe = torch.randn(r1.shape, generator=gen, dtype=torch.float64)
    tensors = {"r1": r1, "r2": r2}
    tensors.update(dict(p.named_parameters()))
    return max_relative_error(lambda: (p(r1, r2) * probe).sum(), tensors, epsilon)


def _double_copy(module: nn.Module) -> nn.Module:
    import copy

    m = copy.deepcopy(module).double()
    # batch statistics keep the objective a pure function of inputs and parameters
    m.train()
    for bn in m.modules():
        if isinstance(bn, nn.BatchNorm2d):
            bn.track_running_stats = False
            bn.running_mean = None
            bn.running_var = None
    return m
