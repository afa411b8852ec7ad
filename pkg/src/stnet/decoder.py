"""Lightweight decoder: project, upsample, concat, channel attention, classify."""
from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn

from .errors import NumericalError, ShapeError
from .spatial_fusion import upsample_bilinear


class CAM(nn.Module):
    """Squeeze-and-excitation channel gate."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        if channels % reduction:
            raise ShapeError(f"reduction {reduction} does not divide {channels} channels")
        self.channels = channels
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.relu = nn.ReLU()
        self.fc2 = nn.Linear(channels // reduction, channels)

    def gate(self, x):
        s = self.pool(x).flatten(1)
        return torch.sigmoid(self.fc2(self.relu(self.fc1(s))))

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ShapeError(f"CAM built for {self.channels} channels, got {x.shape[1]}")
        return x * self.gate(x)[:, :, None, None]

    def flops_extra(self, inputs, output):
        # sigmoid on the gate vector plus the broadcast product
        return output.shape[0] * self.channels + output.numel()


def cam_forward(x: torch.Tensor, p: CAM) -> torch.Tensor:
    squeeze = x.dim() == 3
    out = p(x.unsqueeze(0) if squeeze else x)
    return out[0] if squeeze else out


class Decoder(nn.Module):
    def __init__(self, in_channels: Sequence[int], width: int = 64,
                 reduction: int = 16, num_classes: int = 2):
        super().__init__()
        self.in_channels = tuple(in_channels)
        self.width = width
        self.proj = nn.ModuleList(
            nn.Sequential(nn.Conv2d(c, width, 1), nn.BatchNorm2d(width), nn.ReLU())
            for c in self.in_channels
        )
        self.cam = CAM(width * len(self.in_channels), reduction)
        self.classifier = nn.Conv2d(width * len(self.in_channels), num_classes, 1)

    def forward(self, reps: Sequence[torch.Tensor], out_size=None):
        if len(reps) != len(self.in_channels):
            raise ShapeError(f"decoder needs {len(self.in_channels)} scales, got {len(reps)}")
        h, w = reps[0].shape[-2:]
        feats = [upsample_bilinear(p(r), h, w) for p, r in zip(self.proj, reps)]
        x = self.cam(torch.cat(feats, dim=1))
        logits = self.classifier(x)
        if out_size is None:
            out_size = (4 * h, 4 * w)
        return upsample_bilinear(logits, *out_size)

    def flops_extra(self, inputs, output):
        reps = inputs[0]
        b, (h, w) = reps[0].shape[0], reps[0].shape[-2:]
        # upsampled projections and the final logit upsample
        return b * self.width * h * w * (len(reps) - 1) + output.numel()


def decode(reps: Sequence[torch.Tensor], p: Decoder, out_size=None) -> torch.Tensor:
    return p(reps, out_size)


def to_probability(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over the class axis (dim -3)."""
    if not torch.isfinite(logits).all():
        raise NumericalError("non-finite logits")
    return torch.softmax(logits, dim=-3)


def binarize(prob: torch.Tensor) -> torch.Tensor:
    """1 where p_changed > p_unchanged; ties go to unchanged."""
    return (prob.select(-3, 1) > prob.select(-3, 0)).to(torch.uint8)
