"""Training recipe, checkpoints, evaluation and prediction."""
from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import math
import os
import pickle
import struct
import sys
import zipfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .config import RunConfig, TrainConfig
from .data import BiTemporalTile, ChannelStats, augment, stack_batch
from .decoder import binarize, to_probability
from .errors import ConfigError, DataError, NumericalError, ShapeError
from .losses import hybrid_loss
from .metrics import ConfusionCounts, Scores, accumulate, finalize
from .model import STNet, build_model

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    passed = sum(1 for m in cfg.milestones if m <= epoch)
    return cfg.lr * cfg.lr_gamma ** passed


def param_groups(model: nn.Module, weight_decay: float):
    """Decay conv/linear weights only; norm parameters and biases are exempt."""
    decay, no_decay = [], []
    for module in model.modules():
        for name, p in module.named_parameters(recurse=False):
            if not p.requires_grad:
                continue
            if isinstance(module, (nn.Conv2d, nn.Linear)) and name == "weight":
                decay.append(p)
            else:
                no_decay.append(p)
    return [
        {"params": decay, "weight_decay": weight_decay, "name": "decay"},
        {"params": no_decay, "weight_decay": 0.0, "name": "no_decay"},
    ]


def make_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(param_groups(model, cfg.weight_decay), lr=cfg.lr,
                            betas=(0.9, 0.999), eps=1e-8)


@dataclass
class Checkpoint:
    model_state: dict
    config: dict
    stats: ChannelStats = field(default_factory=ChannelStats)
    optimizer_state: Optional[dict] = None
    epoch: int = 0
    step: int = 0
    rng_state: Optional[dict] = None
    best_f1: Optional[float] = None

    def build(self) -> STNet:
        cfg = RunConfig.from_dict(self.config)
        model = STNet(cfg.encoder, cfg.model, cfg.train.variant)
        model.load_state_dict(self.model_state)
        model.eval()
        return model

    @classmethod
    def from_model(cls, model: STNet, cfg: RunConfig, stats: ChannelStats | None = None, **kw):
        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        return cls(model_state=state, config=cfg.to_dict(), stats=stats or ChannelStats(), **kw)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "model_state": ckpt.model_state,
        "config": ckpt.config,
        "stats": {"mean": list(ckpt.stats.mean), "std": list(ckpt.stats.std)},
        "optimizer_state": ckpt.optimizer_state,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "best_f1": ckpt.best_f1,
    }
    data = _canonical_bytes(payload)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _serialize(obj) -> bytes:
    buf = io.BytesIO()
    torch.save(obj, buf)
    return buf.getvalue()


def _intern(obj):
    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, dict):
        return {_intern(k): _intern(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_intern(v) for v in obj]
    if isinstance(obj, tuple):
        return tuple(_intern(v) for v in obj)
    return obj


def _canonical_bytes(payload: dict) -> bytes:
    # Pickle memo layout depends on string identity, so intern every string;
    # then pin the archive's random serialization id to a content hash.
    data = bytearray(_serialize(_intern(payload)))
    with zipfile.ZipFile(io.BytesIO(bytes(data))) as zf:
        infos = [i for i in zf.infolist() if i.filename.endswith("/.data/serialization_id")]
        if not infos:
            return bytes(data)
        info = infos[0]
        digest = hashlib.sha1()
        for other in zf.infolist():
            if other is not info:
                digest.update(zf.read(other))
        new_id = digest.hexdigest()[: info.file_size].encode().ljust(info.file_size, b"0")
        old_crc = info.CRC
    # Stored entry: data follows the 30-byte local header, name and extra field.
    lh = info.header_offset
    name_len, extra_len = struct.unpack_from("<HH", data, lh + 26)
    start = lh + 30 + name_len + extra_len
    data[start:start + info.file_size] = new_id
    new_crc = struct.pack("<I", zlib.crc32(new_id))
    struct.pack_into("<4s", data, lh + 14, new_crc)
    # Central directory copy of the CRC.
    needle = struct.pack("<I", old_crc)
    name = info.filename.encode()
    pos = 0
    while True:
        pos = data.find(b"PK\x01\x02", pos)
        if pos < 0:
            break
        n_len = struct.unpack_from("<H", data, pos + 28)[0]
        if data[pos + 46:pos + 46 + n_len] == name and data[pos + 16:pos + 20] == needle:
            data[pos + 16:pos + 20] = new_crc
            break
        pos += 4
    return bytes(data)


def load_checkpoint(path) -> Checkpoint:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    version = payload.get("format_version") if isinstance(payload, dict) else None
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format version {version!r}")
    return Checkpoint(
        model_state=payload["model_state"],
        config=payload["config"],
        stats=ChannelStats(tuple(payload["stats"]["mean"]), tuple(payload["stats"]["std"])),
        optimizer_state=payload["optimizer_state"],
        epoch=payload["epoch"],
        step=payload["step"],
        rng_state=payload["rng_state"],
        best_f1=payload["best_f1"],
    )


def _resolve(ckpt) -> Tuple[nn.Module, ChannelStats]:
    if isinstance(ckpt, Checkpoint):
        return ckpt.build(), ckpt.stats
    if isinstance(ckpt, (str, Path)):
        c = load_checkpoint(ckpt)
        return c.build(), c.stats
    if isinstance(ckpt, tuple):
        return ckpt
    return ckpt, ChannelStats()


@torch.no_grad()
def evaluate(ckpt, dataset: Sequence[BiTemporalTile], threshold_free: bool = True,
             threshold: float = 0.5, batch_size: int = 8) -> Scores:
    """Micro-averaged scores over every tile.

    ``ckpt`` is a Checkpoint, a checkpoint path, a model, or (model, stats).
    With ``threshold_free`` the change map is the argmax; otherwise a pixel is
    changed when its changed-class probability exceeds ``threshold``.
    """
    model, stats = _resolve(ckpt)
    model.eval()
    if any(t.mask is None for t in dataset):
        raise DataError("evaluation needs ground-truth masks on every tile")
    counts = ConfusionCounts()
    for i in range(0, len(dataset), batch_size):
        chunk = dataset[i:i + batch_size]
        t1, t2, masks = stack_batch(chunk, stats)
        prob = to_probability(model(torch.from_numpy(t1), torch.from_numpy(t2)))
        if threshold_free:
            pred = binarize(prob)
        else:
            pred = (prob[:, 1] > threshold).to(torch.uint8)
        counts = accumulate(counts, pred.numpy(), masks)
    return finalize(counts)


@torch.no_grad()
def predict(ckpt, t1_image: np.ndarray, t2_image: np.ndarray):
    """Single-pair inference on 3xHxW images in [0, 1].

    Returns the 2xHxW probability map and the binary HxW mask.
    """
    model, stats = _resolve(ckpt)
    model.eval()
    tile = BiTemporalTile(np.asarray(t1_image, np.float32), np.asarray(t2_image, np.float32))
    if tile.t1.ndim != 3 or tile.t1.shape[0] != 3:
        raise ShapeError(f"expected 3xHxW images, got {tile.t1.shape}")
    t1, t2, _ = stack_batch([tile], stats)
    prob = to_probability(model(torch.from_numpy(t1), torch.from_numpy(t2)))[0]
    return prob.numpy(), binarize(prob).numpy()


def _rng_state(rng: np.random.Generator) -> dict:
    return {"numpy": rng.bit_generator.state, "torch": torch.get_rng_state()}


class TrainLog:
    """Append-only JSON-lines log."""

    def __init__(self, path=None):
        self.path = path
        self.records: List[dict] = []

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def train(cfg: RunConfig, train_set: Sequence[BiTemporalTile], val_set: Sequence[BiTemporalTile] = (),
          out_dir=None, stats: ChannelStats | None = None) -> Checkpoint:
    """Adam + multi-step decay on the hybrid loss; returns the best-val-F1 checkpoint.

    Without a validation set the last state is returned. ``out_dir`` receives
    ``best.pt``, ``last.pt`` and ``train_log.jsonl`` when given.
    """
    tc = cfg.train
    if not train_set:
        raise DataError("training set is empty")
    if any(t.mask is None for t in train_set):
        raise DataError("every training tile needs a mask")
    stats = stats or ChannelStats.from_tiles(train_set)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = Path(out_dir) / "train_log.jsonl"
        if log_path.exists():
            log_path.unlink()
    else:
        log_path = None
    tlog = TrainLog(log_path)

    torch.manual_seed(tc.seed)
    model = build_model(cfg.encoder, cfg.model, tc.variant, seed=tc.seed)
    opt = make_optimizer(model, tc)
    rng = np.random.default_rng(tc.seed)
    n = len(train_set)
    steps_per_epoch = max(1, n // tc.batch_size) if n >= tc.batch_size else 1

    best: Optional[Checkpoint] = None
    best_f1 = -1.0
    stale = 0
    step = 0
    last = None
    for epoch in range(tc.epochs):
        lr = lr_at(tc, epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        order = rng.permutation(n)
        model.train()
        for b in range(steps_per_epoch):
            if tc.max_steps is not None and step >= tc.max_steps:
                break
            idx = order[b * tc.batch_size:(b + 1) * tc.batch_size]
            batch = [augment(train_set[i], np.random.default_rng([tc.seed, epoch, int(i)])) for i in idx]
            t1, t2, masks = stack_batch(batch, stats)
            logits = model(torch.from_numpy(t1), torch.from_numpy(t2))
            loss = hybrid_loss(logits, torch.from_numpy(masks), cfg.focal, cfg.dice)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss {loss.item()} at step {step} (epoch {epoch})")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            tlog.write({"step": step, "epoch": epoch, "loss": float(loss.item()), "lr": lr})
            step += 1
        stop = tc.max_steps is not None and step >= tc.max_steps

        last = Checkpoint.from_model(model, cfg, stats, optimizer_state=copy.deepcopy(opt.state_dict()),
                                     epoch=epoch, step=step, rng_state=_rng_state(rng))
        if val_set:
            scores = evaluate((model, stats), val_set)
            tlog.write({"epoch": epoch, "step": step, "val": scores.to_dict()})
            model.train()
            if scores.f1 > best_f1:
                best_f1 = scores.f1
                stale = 0
                last.best_f1 = best_f1
                best = last
                if out_dir is not None:
                    save_checkpoint(best, Path(out_dir) / "best.pt")
            else:
                stale += 1
        if out_dir is not None:
            save_checkpoint(last, Path(out_dir) / "last.pt")
        if stop or (tc.patience is not None and stale >= tc.patience):
            break
    return best if best is not None else last
