"""Weight-shared ResNet-18 style encoder returning a four-level feature pyramid."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Tuple

import torch
import torch.nn as nn

from .errors import ConfigError, CoregistrationError, ShapeError

FeaturePyramid = List[torch.Tensor]


@dataclass
class EncoderConfig:
    stage_channels: Tuple[int, ...] = (64, 128, 256, 512)
    stage_blocks: Tuple[int, ...] = (2, 2, 2, 2)
    width_multiplier: float = 1.0
    pretrained: bool = False

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.stage_blocks = tuple(int(b) for b in self.stage_blocks)
        if len(self.stage_channels) != 4 or len(self.stage_blocks) != 4:
            raise ConfigError(
                f"encoder needs 4 stages, got channels={self.stage_channels} "
                f"blocks={self.stage_blocks}"
            )
        if any(c <= 0 for c in self.stage_channels) or any(b <= 0 for b in self.stage_blocks):
            raise ConfigError("stage channels and block counts must be positive")
        if not self.width_multiplier > 0:
            raise ConfigError(f"width_multiplier must be positive, got {self.width_multiplier}")

    @property
    def channels(self) -> Tuple[int, ...]:
        """Stage widths after applying the width multiplier."""
        if self.width_multiplier == 1:
            return self.stage_channels
        out = []
        for c in self.stage_channels:
            scaled = max(8, int(round(c * self.width_multiplier / 8)) * 8)
            out.append(scaled)
        return tuple(out)

    @property
    def stem_channels(self) -> int:
        return self.channels[0]


class BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)

    def flops_extra(self, inputs, output):
        # residual add
        return output.numel()


class Encoder(nn.Module):
    """ResNet-18 layout without the classification head.

    Module names follow torchvision's ``resnet18`` so that its state dict
    loads directly when ``pretrained`` is set with the default layout.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.channels
        self.conv1 = nn.Conv2d(3, cfg.stem_channels, 7, 2, 3, bias=False)
        self.bn1 = nn.BatchNorm2d(cfg.stem_channels)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, 2, 1)
        in_ch = cfg.stem_channels
        for i, (ch, n) in enumerate(zip(chans, cfg.stage_blocks)):
            stride = 1 if i == 0 else 2
            blocks = [BasicBlock(in_ch, ch, stride)]
            blocks += [BasicBlock(ch, ch) for _ in range(n - 1)]
            self.add_module(f"layer{i + 1}", nn.Sequential(*blocks))
            in_ch = ch

    @property
    def channels(self) -> Tuple[int, ...]:
        return self.cfg.channels

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        levels = []
        for layer in (self.layer1, self.layer2, self.layer3, self.layer4):
            x = layer(x)
            levels.append(x)
        return levels


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.GroupNorm)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def _load_pretrained(enc: Encoder) -> None:
    cfg = enc.cfg
    if cfg.channels != (64, 128, 256, 512) or cfg.stage_blocks != (2, 2, 2, 2):
        raise ConfigError("pretrained weights exist only for the default ResNet-18 layout")
    try:
        from torchvision.models import ResNet18_Weights, resnet18

        state = resnet18(weights=ResNet18_Weights.IMAGENET1K_V1).state_dict()
    except Exception as exc:  # offline, missing torchvision, ...
        raise ConfigError(f"could not fetch pretrained ResNet-18 weights: {exc}") from exc
    state = {k: v for k, v in state.items() if not k.startswith("fc.")}
    enc.load_state_dict(state)


def build_encoder(cfg: EncoderConfig | None = None, seed: int = 0) -> Encoder:
    cfg = cfg or EncoderConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        enc = Encoder(cfg)
        init_weights(enc)
    if cfg.pretrained:
        _load_pretrained(enc)
    return enc


def check_input_size(h: int, w: int) -> None:
    if h % 32:
        raise ShapeError(f"height {h} is not divisible by 32")
    if w % 32:
        raise ShapeError(f"width {w} is not divisible by 32")


def extract_pyramid(enc: Encoder, image: torch.Tensor) -> FeaturePyramid:
    """Run one image (3xHxW) or batch (Bx3xHxW) through the encoder."""
    squeeze = image.dim() == 3
    if squeeze:
        image = image.unsqueeze(0)
    if image.dim() != 4 or image.shape[1] != 3:
        raise ShapeError(f"expected 3xHxW or Bx3xHxW image, got {tuple(image.shape)}")
    check_input_size(image.shape[-2], image.shape[-1])
    levels = enc(image)
    return [lv[0] for lv in levels] if squeeze else levels


def extract_bitemporal(enc: Encoder, t1: torch.Tensor, t2: torch.Tensor) -> Tuple[FeaturePyramid, FeaturePyramid]:
    """Both streams use the same module, so weight sharing is structural."""
    if t1.shape != t2.shape:
        raise CoregistrationError(
            f"T1 {tuple(t1.shape)} and T2 {tuple(t2.shape)} are not co-registered"
        )
    return extract_pyramid(enc, t1), extract_pyramid(enc, t2)
