"""Full network assembly and its ablation variants."""
from __future__ import annotations

import torch
import torch.nn as nn

from .backbone import Encoder, EncoderConfig, check_input_size, init_weights, _load_pretrained
from .config import VARIANTS, ModelConfig
from .decoder import Decoder
from .errors import ConfigError, CoregistrationError, ShapeError
from .spatial_fusion import SFF
from .temporal_fusion import TFF, BaseFusion


class STNet(nn.Module):
    """Siamese encoder -> per-scale temporal fusion -> cross-scale attention -> decoder.

    ``variant`` selects the ablation wiring: ``base`` fuses with
    concat+1x1 conv, ``base+tff`` swaps in gated fusion, ``base+sff`` adds
    attention guidance from the deepest scale, ``full`` does both.
    """

    def __init__(self, enc_cfg: EncoderConfig | None = None, model_cfg: ModelConfig | None = None,
                 variant: str = "full"):
        super().__init__()
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
        enc_cfg = enc_cfg or EncoderConfig()
        model_cfg = model_cfg or ModelConfig()
        self.variant = variant
        self.encoder = Encoder(enc_cfg)
        chans = enc_cfg.channels
        fusion = TFF if variant in ("base+tff", "full") else BaseFusion
        self.fusions = nn.ModuleList(fusion(c) for c in chans)
        self.sff = None
        if variant in ("base+sff", "full"):
            self.sff = nn.ModuleList(
                SFF(c, chans[-1], key_downsample=model_cfg.key_downsample,
                    max_tokens=model_cfg.max_tokens)
                for c in chans[:-1]
            )
        self.decoder = Decoder(chans, model_cfg.decoder_width, model_cfg.cam_reduction)

    def change_representations(self, t1, t2):
        # one encoder pass over both dates: same weights, shared batch statistics
        b = t1.shape[0]
        levels = self.encoder(torch.cat([t1, t2]))
        reps = [f(x[:b], x[b:]) for f, x in zip(self.fusions, levels)]
        if self.sff is not None:
            deepest = reps[-1]
            reps = [s(r, deepest) for s, r in zip(self.sff, reps[:-1])] + [deepest]
        return reps

    def forward(self, t1, t2):
        if t1.shape != t2.shape:
            raise CoregistrationError(f"T1 {tuple(t1.shape)} vs T2 {tuple(t2.shape)}")
        if t1.dim() != 4 or t1.shape[1] != 3:
            raise ShapeError(f"expected Bx3xHxW input, got {tuple(t1.shape)}")
        h, w = t1.shape[-2:]
        check_input_size(h, w)
        return self.decoder(self.change_representations(t1, t2), out_size=(h, w))


def build_model(enc_cfg: EncoderConfig | None = None, model_cfg: ModelConfig | None = None,
                variant: str = "full", seed: int = 0) -> STNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = STNet(enc_cfg, model_cfg, variant)
        # fan-out init for the backbone only; heads keep torch defaults so the
        # 2-way classifier does not start saturated
        init_weights(model.encoder)
        for m in model.modules():
            if isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        if model.sff is not None:
            # zero output projection: attention starts as the identity on the shallow input
            for s in model.sff:
                nn.init.zeros_(s.wo.weight)
                nn.init.zeros_(s.wo.bias)
    if model.encoder.cfg.pretrained:
        _load_pretrained(model.encoder)
    return model
