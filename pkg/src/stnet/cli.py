"""Command-line entry point: ``stnet {tile,synth,train,eval,predict,profile}``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical error.
Failures print one line ``<ErrorClass>: <message>`` on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import data as D
from .config import load_config
from .errors import ConfigError, DataError, STNetError
from .metrics import format_report

log = logging.getLogger("stnet")


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _read_raster(path, gray=False):
    if not Path(path).is_file():
        raise D.IngestionError(f"no such file: {path}")
    Image.MAX_IMAGE_PIXELS = None  # whole-scene rasters are legitimately huge
    return D.read_gray(path) if gray else D.read_rgb(path)


def cmd_tile(args) -> int:
    a = _read_raster(args.a)
    b = _read_raster(args.b)
    label = _read_raster(args.label, gray=True) if args.label else None
    tiles = D.tile_pair(a, b, label, args.size, args.stride)
    out = Path(args.out)
    for sub in ("A", "B") + (("label",) if label is not None else ()):
        os.makedirs(out / sub, exist_ok=True)
    for t in tiles:
        D.write_rgb(out / "A" / f"{t.name}{args.ext}", t.t1)
        D.write_rgb(out / "B" / f"{t.name}{args.ext}", t.t2)
        if t.mask is not None:
            # raw label values are kept; normalize_mask runs at ingestion
            D.write_gray(out / "label" / f"{t.name}{args.ext}", t.mask)
    print(len(tiles))
    return 0


def cmd_synth(args) -> int:
    splits = D.synth_splits(args.seed, args.n, args.size, args.change_rate)
    D.save_dataset(args.out, splits)
    print(" ".join(f"{k}={len(v)}" for k, v in splits.items()))
    return 0


def _overrides(args) -> dict:
    train = {}
    for key in ("seed", "variant", "max_steps", "epochs"):
        value = getattr(args, key, None)
        if value is not None:
            train[key] = value
    over = {"train": train} if train else {}
    if getattr(args, "data", None):
        over["data"] = {"root": str(args.data)}
    return over


def cmd_train(args) -> int:
    from .training import train

    cfg = load_config(args.config, _overrides(args))
    if not cfg.data.root:
        raise UsageError("no dataset root: pass --data or set data.root in the config")
    os.makedirs(args.out, exist_ok=True)
    with open(Path(args.out) / "config.yaml", "w") as fh:
        fh.write(cfg.dump())
    train_set = D.load_dataset(cfg.data.root, "train")
    val_set = D.load_dataset(cfg.data.root, "val") if (Path(cfg.data.root) / "val").is_dir() else []
    ckpt = train(cfg, train_set, val_set, out_dir=args.out)
    best = "n/a" if ckpt.best_f1 is None else f"{ckpt.best_f1:.6f}"
    print(f"best_step={ckpt.step} best_val_f1={best}")
    return 0


def cmd_eval(args) -> int:
    from .training import evaluate, load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    tiles = D.load_dataset(args.data, args.split)
    report = format_report(evaluate(ckpt, tiles))
    if args.report:
        Path(args.report).write_text(report)
    sys.stdout.write(report)
    return 0


OVERLAY_COLOURS = {
    "tp": (255, 255, 255),
    "tn": (0, 0, 0),
    "fp": (255, 0, 0),
    "fn": (0, 255, 0),
}


def overlay(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """HxWx3 uint8 rendering: white TP, black TN, red FP, green FN."""
    pred, gt = pred.astype(bool), gt.astype(bool)
    img = np.zeros(pred.shape + (3,), dtype=np.uint8)
    img[pred & gt] = OVERLAY_COLOURS["tp"]
    img[pred & ~gt] = OVERLAY_COLOURS["fp"]
    img[~pred & gt] = OVERLAY_COLOURS["fn"]
    return img


def cmd_predict(args) -> int:
    from .training import load_checkpoint, predict

    ckpt = load_checkpoint(args.checkpoint)
    t1 = _read_raster(args.a).astype(np.float32) / 255.0
    t2 = _read_raster(args.b).astype(np.float32) / 255.0
    if t1.shape != t2.shape:
        raise D.CoregistrationError(f"{args.a} {t1.shape[1:]} vs {args.b} {t2.shape[1:]}")
    prob, mask = predict(ckpt, t1, t2)
    D.write_gray(args.out_mask, mask * 255)
    if args.out_prob:
        if str(args.out_prob).endswith(".npy"):
            np.save(args.out_prob, prob[1].astype(np.float32))
        else:
            D.write_gray(args.out_prob, D.to_uint8(prob[1]))
    if args.label:
        gt = D.normalize_mask(_read_raster(args.label, gray=True))
        if gt.shape != mask.shape:
            raise D.CoregistrationError(f"label {gt.shape} vs prediction {mask.shape}")
        path = args.out_overlay or str(Path(args.out_mask).with_name(Path(args.out_mask).stem + "_overlay.png"))
        Image.fromarray(overlay(mask, gt)).save(path)
    print(f"changed_pixels={int(mask.sum())}")
    return 0


def cmd_profile(args) -> int:
    from .model import build_model
    from .profiling import profile

    cfg = load_config(args.config)
    model = build_model(cfg.encoder, cfg.model, cfg.train.variant, seed=cfg.train.seed)
    report = profile(model, (3, args.input_size, args.input_size))
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("tile", help="cut co-registered rasters into a grid of tiles")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--label")
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--stride", type=int, default=256)
    s.add_argument("--out", required=True)
    s.add_argument("--ext", default=".png")
    s.set_defaults(func=cmd_tile)

    s = sub.add_parser("synth", help="write a synthetic train/val/test dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--change-rate", type=float, default=0.15)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--variant")
    s.add_argument("--max-steps", type=int)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=D.SPLITS)
    s.add_argument("--report")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="change map for one image pair")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--out-mask", required=True)
    s.add_argument("--out-prob")
    s.add_argument("--label")
    s.add_argument("--out-overlay")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("profile", help="parameter and FLOP report")
    s.add_argument("--config")
    s.add_argument("--input-size", type=int, default=256)
    s.set_defaults(func=cmd_profile)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
        return args.func(args)
    except STNetError as exc:
        print(f"{type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"DataError: {exc}".replace("\n", " "), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
