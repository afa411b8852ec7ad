"""Hybrid focal + dice objective."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

PROB_EPS = 1e-7


@dataclass
class FocalConfig:
    alpha: float = 0.2
    gamma: float = 2.0

    def __post_init__(self):
        if not 0 <= self.alpha <= 1 or self.gamma < 0:
            raise ConfigError(f"invalid focal config alpha={self.alpha} gamma={self.gamma}")


@dataclass
class DiceConfig:
    smooth: float = 1.0

    def __post_init__(self):
        if self.smooth < 0:
            raise ConfigError(f"dice smooth must be >= 0, got {self.smooth}")


def focal_loss(prob_changed: torch.Tensor, target: torch.Tensor, cfg: FocalConfig = FocalConfig()) -> torch.Tensor:
    """Mean of -alpha (1 - p_hat)^gamma log(p_hat) over all pixels."""
    if prob_changed.shape != target.shape:
        raise ShapeError(f"prob {tuple(prob_changed.shape)} vs target {tuple(target.shape)}")
    p = prob_changed.clamp(PROB_EPS, 1 - PROB_EPS)
    y = target.to(p.dtype)
    p_hat = y * p + (1 - y) * (1 - p)
    return (-cfg.alpha * (1 - p_hat) ** cfg.gamma * torch.log(p_hat)).mean()


def dice_loss(prob: torch.Tensor, target: torch.Tensor, cfg: DiceConfig = DiceConfig()) -> torch.Tensor:
    """1 - mean over the two classes of the soft dice, summed over all pixels (and batch).

    ``prob`` is [B,]2xHxW, ``target`` is [B,]HxW binary.
    """
    if prob.shape[-3] != 2 or prob.select(-3, 0).shape != target.shape:
        raise ShapeError(f"prob {tuple(prob.shape)} vs target {tuple(target.shape)}")
    onehot = F.one_hot(target.long(), 2).to(prob.dtype).movedim(-1, -3)
    dims = [d for d in range(prob.dim()) if d != prob.dim() - 3]
    inter = (prob * onehot).sum(dims)
    denom = prob.sum(dims) + onehot.sum(dims)
    dice = (2 * inter + cfg.smooth) / (denom + cfg.smooth)
    return 1 - dice.mean()


def hybrid_loss(logits: torch.Tensor, target: torch.Tensor,
                fcfg: FocalConfig = FocalConfig(), dcfg: DiceConfig = DiceConfig()) -> torch.Tensor:
    prob = torch.softmax(logits, dim=-3)
    return focal_loss(prob.select(-3, 1), target, fcfg) + dice_loss(prob, target, dcfg)
