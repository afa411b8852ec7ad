"""End-to-end acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is repeated in the terminal summary.
"""
import json
import math
import time

import numpy as np
import pytest
import torch

from conftest import attention_loop
from stnet.backbone import EncoderConfig
from stnet.cli import main
from stnet.config import ModelConfig, RunConfig
from stnet.data import (BiTemporalTile, augment, load_dataset, save_dataset, synth_splits, tile_pair)
from stnet.errors import DataError
from stnet.gradcheck import max_relative_error, network_backward_check
from stnet.losses import DiceConfig, FocalConfig, dice_loss, focal_loss, hybrid_loss
from stnet.metrics import ConfusionCounts, finalize, f1_from_pr, iou_from_f1
from stnet.model import build_model
from stnet.profiling import profile
from stnet.spatial_fusion import SFF, scaled_dot_attention, sff_backward_check
from stnet.temporal_fusion import TFF, tff_backward_check
from stnet.training import evaluate, train

VARIANTS = ("base", "base+tff", "base+sff", "full")
SEEDS = (0, 1, 2)


def _randomize(module, seed, scale):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen) * scale)
    return module


def test_criterion_1_gradient_oracles(criterion):
    with criterion(1, "gradient oracles") as c:
        start = time.perf_counter()
        gen = torch.Generator().manual_seed(0)

        tff = _randomize(TFF(4), 1, 0.5)
        tff_err = tff_backward_check(torch.randn(4, 4, 4, generator=gen), torch.randn(4, 4, 4, generator=gen), tff)

        sff = _randomize(SFF(4, 8, dim=8), 2, 0.4)
        sff_err = sff_backward_check(torch.randn(4, 4, 4, generator=gen), torch.randn(8, 2, 2, generator=gen), sff)

        logits = torch.randn(2, 2, 4, 4, generator=gen, dtype=torch.float64)
        target = torch.randint(0, 2, (2, 4, 4), generator=gen)
        loss_err = max_relative_error(lambda: hybrid_loss(logits, target), {"logits": logits})

        model = build_model(EncoderConfig(width_multiplier=0.25, stage_blocks=(1, 1, 1, 1)),
                            ModelConfig(decoder_width=16), seed=0)
        with torch.no_grad():
            for s in model.sff:
                s.wo.weight.normal_(0, 0.2, generator=gen)
        t1 = torch.randn(2, 3, 32, 32, generator=gen)
        t2 = torch.randn(2, 3, 32, 32, generator=gen)
        tgt = torch.randint(0, 2, (2, 32, 32), generator=gen)
        net_err = network_backward_check(model, t1, t2, tgt)
        elapsed = time.perf_counter() - start

        c.detail = (f"tff {tff_err:.1e}, sff {sff_err:.1e}, loss {loss_err:.1e}, "
                    f"network {net_err:.1e}, {elapsed:.0f}s")
        assert tff_err < 1e-4 and sff_err < 1e-4 and loss_err < 1e-4
        assert net_err < 1e-3
        assert elapsed < 120


def test_criterion_2_attention_oracle(criterion):
    with criterion(2, "attention vs loop oracle") as c:
        rng = np.random.default_rng(0)
        worst_diff = worst_row = 0.0
        for _ in range(50):
            n, m, d, dv = rng.integers(1, 65), rng.integers(1, 65), rng.integers(1, 17), rng.integers(1, 9)
            q, k, v = rng.normal(size=(n, d)), rng.normal(size=(m, d)), rng.normal(size=(m, dv))
            got = scaled_dot_attention(*(torch.from_numpy(a) for a in (q, k, v))).numpy()
            worst_diff = max(worst_diff, np.abs(got - attention_loop(q, k, v)).max())
            weights = scaled_dot_attention(torch.from_numpy(q), torch.from_numpy(k), torch.eye(m, dtype=torch.float64))
            worst_row = max(worst_row, (weights.sum(-1) - 1).abs().max().item())
        c.detail = f"max diff {worst_diff:.1e}, max row-sum error {worst_row:.1e}"
        assert worst_diff < 1e-10
        assert worst_row < 1e-6


def test_criterion_3_loss_values(criterion):
    with criterion(3, "loss values") as c:
        focal = focal_loss(torch.tensor([0.5], dtype=torch.float64), torch.tensor([1]),
                           FocalConfig(alpha=0.2, gamma=2.0)).item()
        prob = torch.full((2, 4, 4), 0.5, dtype=torch.float64)
        target = torch.zeros(4, 4, dtype=torch.long)
        target[:2] = 1
        dice = dice_loss(prob, target, DiceConfig(smooth=0.0)).item()
        c.detail = f"focal {focal:.10f}, dice {dice:.10f}"
        assert abs(focal - 0.2 * 0.25 * math.log(2)) < 1e-9
        assert abs(dice - 0.5) < 1e-9


def test_criterion_4_metric_identities(criterion):
    with criterion(4, "metric consistency") as c:
        s = finalize(ConfusionCounts(tp=2, fp=1, fn=1, tn=12))
        assert (s.precision, s.recall, s.f1, s.iou, s.oa) == (2 / 3, 2 / 3, 2 / 3, 0.5, 0.875)
        f1 = f1_from_pr(0.8784, 0.8708)
        iou = iou_from_f1(f1)
        c.detail = f"F1 {f1:.4f}, IoU {iou:.4f}"
        assert abs(f1 - 0.8746) <= 1e-4
        assert abs(iou - 0.7772) <= 1e-4


def test_criterion_5_profile_bands(criterion):
    with criterion(5, "parameter and FLOP bands") as c:
        r = profile(build_model(seed=0), (3, 256, 256))
        conventions = {"flops": r.flops_total, "macs": r.macs_total, "flops_no_norm_act": r.flops_no_norm_act}
        in_band = [k for k, v in conventions.items() if 7.7e9 <= v <= 12.5e9]
        c.detail = (f"params {r.params_total / 1e6:.2f} M, "
                    + ", ".join(f"{k} {v / 1e9:.2f} G" for k, v in conventions.items())
                    + f"; in band: {', '.join(in_band) or 'none'}")
        assert 11.7e6 <= r.params_total <= 17.5e6
        assert in_band


@pytest.fixture(scope="module")
def synth_benchmark():
    return synth_splits(0, 200, 64)


_RUNS = {}


def _benchmark_run(splits, variant, seed):
    """Train one quarter-width model for 500 steps; cached per (variant, seed)."""
    key = (variant, seed)
    if key not in _RUNS:
        cfg = RunConfig.from_dict({"encoder": {"width_multiplier": 0.25},
                                   "train": {"max_steps": 500, "seed": seed, "variant": variant}})
        start = time.perf_counter()
        ckpt = train(cfg, splits["train"], splits["val"])
        elapsed = time.perf_counter() - start
        _RUNS[key] = (ckpt, evaluate(ckpt, splits["test"]).f1, elapsed)
    return _RUNS[key]


@pytest.mark.slow
def test_criterion_6_synthetic_end_to_end(criterion, synth_benchmark):
    with criterion(6, "synthetic end-to-end F1") as c:
        ckpt, f1, elapsed = _benchmark_run(synth_benchmark, "full", 0)
        c.detail = f"test F1 {f1:.4f}, best checkpoint at step {ckpt.step} of 500, trained in {elapsed:.0f}s"
        assert f1 >= 0.80
        assert elapsed <= 15 * 60


@pytest.mark.slow
def test_criterion_7_ablation_ordering(criterion, synth_benchmark):
    with criterion(7, "ablation ordering over 3 seeds") as c:
        means = {v: float(np.mean([_benchmark_run(synth_benchmark, v, s)[1] for s in SEEDS])) for v in VARIANTS}
        c.detail = ", ".join(f"{v} {m:.4f}" for v, m in means.items())
        assert means["full"] >= means["base+tff"] >= means["base"]
        assert means["full"] >= means["base+sff"] >= means["base"]


def _losses(run_dir):
    with open(run_dir / "train_log.jsonl") as fh:
        return [r["loss"] for r in map(json.loads, fh) if "loss" in r]


def _tree(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_8_determinism(criterion, tmp_path, capsys):
    with criterion(8, "determinism") as c:
        for name in ("d1", "d2"):
            assert main(["synth", "--out", str(tmp_path / name), "--n", "40", "--seed", "0"]) == 0
        assert _tree(tmp_path / "d1") == _tree(tmp_path / "d2")
        for name in ("r1", "r2"):
            code = main(["train", "--data", str(tmp_path / "d1"), "--out", str(tmp_path / name),
                         "--seed", "0", "--max-steps", "50"])
            assert code == 0
        capsys.readouterr()
        a, b = _losses(tmp_path / "r1"), _losses(tmp_path / "r2")
        rel = max(abs(x - y) / max(abs(x), 1e-12) for x, y in zip(a, b))
        c.detail = f"{len(a)} steps, max relative loss difference {rel:.1e}, datasets byte-identical"
        assert len(a) == len(b) == 50
        assert rel <= 1e-6


def test_criterion_9_data_contracts(criterion, tmp_path):
    with criterion(9, "data contracts") as c:
        rng = np.random.default_rng(0)
        for h, w, size, stride in ((512, 512, 256, 256), (512, 512, 256, 128), (300, 700, 64, 48)):
            a = rng.random((3, h, w), dtype=np.float32)
            tiles = tile_pair(a, a, np.zeros((h, w), np.uint8), size, stride)
            expected = ((h - size) // stride + 1) * ((w - size) // stride + 1)
            assert len(tiles) == expected

        base = BiTemporalTile(rng.random((3, 32, 32), dtype=np.float32), rng.random((3, 32, 32), dtype=np.float32),
                              (rng.random((32, 32)) < 0.3).astype(np.uint8))
        count = int(base.mask.sum())
        for _ in range(1000):
            assert int(augment(base, rng).mask.sum()) == count

        good = BiTemporalTile(base.t1, base.t2, base.mask, "x")
        save_dataset(tmp_path / "ok", {"train": [good]})
        assert len(load_dataset(tmp_path / "ok", "train")) == 1
        save_dataset(tmp_path / "missing", {"train": [good]})
        (tmp_path / "missing" / "train" / "label" / "x.png").unlink()
        save_dataset(tmp_path / "sizes", {"train": [good]})
        save_dataset(tmp_path / "other", {"train": [BiTemporalTile(base.t1[:, :16], base.t2[:, :16],
                                                                    base.mask[:16], "x")]})
        (tmp_path / "other" / "train" / "B" / "x.png").replace(tmp_path / "sizes" / "train" / "B" / "x.png")
        for bad in ("missing", "sizes"):
            with pytest.raises(DataError):
                load_dataset(tmp_path / bad, "train")
        c.detail = "3 raster grids, 1000 augmentation draws, 2 malformed triplets rejected"
