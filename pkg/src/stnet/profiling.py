"""Analytic parameter and FLOP accounting via forward hooks."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Tuple

import torch
import torch.nn as nn

from .errors import ShapeError
from .spatial_fusion import Attention

KINDS = ("conv", "linear", "attention", "norm_act", "elementwise")


@dataclass
class ProfileReport:
    params_total: int
    params_by_module: Dict[str, int]
    flops_total: int  # one multiply-accumulate = 2 FLOPs, norm/act/elementwise included
    flops_by_module: Dict[str, int]
    flops_by_kind: Dict[str, int]
    macs_total: int  # multiply-accumulates only (conv, linear, attention matmuls)
    flops_no_norm_act: int
    input_shape: Tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "params_total": self.params_total,
            "params_total_m": round(self.params_total / 1e6, 3),
            "flops_total": self.flops_total,
            "flops_total_g": round(self.flops_total / 1e9, 3),
            "macs_total": self.macs_total,
            "macs_total_g": round(self.macs_total / 1e9, 3),
            "flops_no_norm_act": self.flops_no_norm_act,
            "flops_no_norm_act_g": round(self.flops_no_norm_act / 1e9, 3),
            "flops_by_kind": dict(self.flops_by_kind),
            "params_by_module": dict(self.params_by_module),
            "flops_by_module": dict(self.flops_by_module),
        }


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def _groups(model: nn.Module):
    """Top-level children, with ModuleList entries split out (fusions.0, sff.1, ...)."""
    out = {}
    for name, child in model.named_children():
        if isinstance(child, nn.ModuleList):
            for i, sub in enumerate(child):
                out[f"{name}.{i}"] = sub
        else:
            out[name] = child
    if not out:
        out["model"] = model
    return out


def _leaf_cost(m: nn.Module, inputs, output):
    """(macs, norm_act ops, elementwise ops) for one module call, excluding children."""
    if isinstance(m, nn.Conv2d):
        x = inputs[0]
        kh, kw = m.kernel_size
        macs = kh * kw * (m.in_channels // m.groups) * output.numel()
        bias = output.numel() if m.bias is not None else 0
        return macs, 0, bias
    if isinstance(m, nn.Linear):
        macs = m.in_features * output.numel()
        return macs, 0, output.numel() if m.bias is not None else 0
    if isinstance(m, Attention):
        q, k, v = inputs
        nq, nk, d = q.shape[-2], k.shape[-2], q.shape[-1]
        batch = q.numel() // (nq * d)
        return batch * nq * nk * (d + v.shape[-1]), 0, batch * nq * nk
    if isinstance(m, (nn.BatchNorm2d, nn.ReLU, nn.Sigmoid)):
        return 0, output.numel(), 0
    if isinstance(m, nn.MaxPool2d):
        k = m.kernel_size if isinstance(m.kernel_size, int) else m.kernel_size[0]
        return 0, 0, output.numel() * k * k
    if isinstance(m, nn.AdaptiveAvgPool2d):
        return 0, 0, inputs[0].numel()
    extra = getattr(m, "flops_extra", None)
    if extra is not None:
        return 0, 0, int(extra(inputs, output))
    return 0, 0, 0


def _profile(model: nn.Module, input_shape):
    groups = _groups(model)
    owner = {}
    for gname, g in groups.items():
        for m in g.modules():
            owner[m] = gname
    macs = defaultdict(int)
    norm_act = defaultdict(int)
    elem = defaultdict(int)
    kind = defaultdict(int)

    def hook(m, inputs, output):
        a, b, c = _leaf_cost(m, inputs, output)
        g = owner.get(m, "model")
        macs[g] += a
        norm_act[g] += b
        elem[g] += c
        k = "attention" if isinstance(m, Attention) else "linear" if isinstance(m, nn.Linear) else "conv"
        kind[k] += 2 * a
        kind["norm_act"] += b
        kind["elementwise"] += c

    handles = [m.register_forward_hook(hook) for m in model.modules()]
    was_training = model.training
    model.eval()
    try:
        x = torch.zeros((1,) + tuple(input_shape))
        with torch.no_grad():
            model(x, x.clone())
    except ShapeError:
        raise
    except RuntimeError as exc:
        raise ShapeError(f"input shape {tuple(input_shape)} incompatible with model: {exc}") from exc
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    return groups, macs, norm_act, elem, kind


def count_flops(model: nn.Module, input_shape=(3, 256, 256)) -> int:
    """Total FLOPs for one bi-temporal pair of shape ``input_shape`` (MAC = 2 FLOPs)."""
    return profile(model, input_shape).flops_total


def profile(model: nn.Module, input_shape=(3, 256, 256)) -> ProfileReport:
    if len(input_shape) != 3:
        raise ShapeError(f"input shape must be CxHxW, got {tuple(input_shape)}")
    groups, macs, norm_act, elem, kind = _profile(model, input_shape)
    names = list(groups)
    flops_by = {g: 2 * macs[g] + norm_act[g] + elem[g] for g in names}
    params_by = {g: count_params(groups[g]) for g in names}
    return ProfileReport(
        params_total=sum(params_by.values()),
        params_by_module=params_by,
        flops_total=sum(flops_by.values()),
        flops_by_module=flops_by,
        flops_by_kind={k: kind[k] for k in KINDS},
        macs_total=sum(macs[g] for g in names),
        flops_no_norm_act=sum(2 * macs[g] + elem[g] for g in names),
        input_shape=tuple(input_shape),
    )
