"""``steam`` command line: train, eval, plan, account, verify, ablate."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ModelSettings, RunConfig, load_config, override, parse_spatial
from .data import Dataset, Normalization, find_idx_pair, load_cifar_binary, load_idx, renormalize, subsample
from .errors import ConfigError, SteamError
from .model import DeskCNN, model_from_config
from .rng import Rng
from .train import (Schedule, capture, evaluate, load_checkpoint, restore, save_checkpoint,
                    train_epochs)
from .unit import SteamConfig
from .verify import run_all
from .zoo import BACKBONES, PLACEMENT_POLICIES, StageSpec, account, plan_placement

ABLATION_AXES = {
    "arrangement": [("arrangement", v) for v in ("ca-sa", "sa-ca", "ca+sa")],
    "degree": [("channel_hops", v) for v in (1, 2)],
    "heads": [("heads", v) for v in (1, 2, 4, 8)],
    "pool": [("spatial_pool", v) for v in ("avg", "max", "avg+max")],
    "edgedrop": [("edge_drop", v) for v in (True, False)],
    "activation": [("inter_activation", v) for v in ("tanh", "relu", "sigmoid", "none")],
}


def _ints(text: str) -> tuple:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _spatial(text: str) -> tuple:
    try:
        return parse_spatial([t.strip() for t in text.split(",") if t.strip()])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected sizes like 56,28 or 56x56,28x28, got {text!r}") from None


# -- data and model plumbing -----------------------------------------------------------------


def _data_dir(flag) -> Path:
    d = flag or os.environ.get("STEAM_DATA_DIR")
    if not d:
        raise ConfigError("no dataset directory: pass --data or set STEAM_DATA_DIR")
    return Path(d)


def load_splits(cfg: RunConfig, rng: Rng):
    """Stratified train/validation subsets, both normalised with the training subset's statistics."""
    d = _data_dir(cfg.data.dir)
    if cfg.data.format == "idx":
        train = load_idx(*find_idx_pair(d, "train"))
        test = load_idx(*find_idx_pair(d, "test"), norm=train.norm)
    else:
        train = _concat_cifar(sorted(d.glob("data_batch_*.bin")))
        test = load_cifar_binary(d / "test_batch.bin", norm=train.norm)
    t = cfg.train
    if t.train_size is not None:
        train = subsample(train, t.train_size, rng)
    if t.val_size is not None:
        test = subsample(test, t.val_size, rng)
    train = renormalize(train)
    return train, renormalize(test, train.norm)


def _concat_cifar(paths):
    if not paths:
        raise ConfigError("no data_batch_*.bin files found")
    parts = [load_cifar_binary(p) for p in paths]
    images = np.concatenate([p.images * p.norm.std.reshape(1, -1, 1, 1) + p.norm.mean.reshape(1, -1, 1, 1)
                             for p in parts])
    norm = Normalization.fit(images)
    return Dataset(norm.apply(images), np.concatenate([p.labels for p in parts]), parts[0].class_count, norm)


def build_model(model: ModelSettings, input_shape, num_classes: int, rng: Rng) -> DeskCNN:
    return DeskCNN(model.stage_spec(), model.steam, rng, input_shape, num_classes, model.policy)


def _norm_extras(norm: Normalization) -> dict:
    return {"norm_mean": norm.mean, "norm_std": norm.std}


# -- subcommands -----------------------------------------------------------------------------


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = override(cfg, train={"epochs": args.epochs, "seed": args.seed, "lr": args.lr,
                               "batch_size": args.batch_size, "train_size": args.train_size,
                               "val_size": args.val_size},
                   data={"dir": args.data})
    if getattr(args, "no_steam", False):
        cfg = replace(cfg, model=replace(cfg.model, steam=None))
    return cfg


def cmd_train(args) -> int:
    cfg = _run_config(args)
    print("effective config: " + json.dumps(cfg.to_dict(), sort_keys=True))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = Rng(cfg.train.seed)
    train, val = load_splits(cfg, rng)
    model = build_model(cfg.model, train.sample_shape, train.class_count, rng)
    print(f"model: {model.num_params} params ({model.steam_params} in {len(model.steam_units)} STEAM units); "
          f"{model.plan.describe()}")
    schedule = Schedule.scaled(cfg.train.lr, cfg.train.epochs)

    state, start, history = None, 0, None
    if args.resume:
        ckpt = load_checkpoint(args.resume, model.config_digest())
        state, start, history = restore(model, ckpt), ckpt.epoch, ckpt.history
        rng = Rng.from_state(ckpt.rng_state)
        print(f"resumed from {args.resume} at epoch {start}")

    def on_epoch(epoch, hist, st):
        (out / "metrics.csv").write_text(hist.to_csv())
        ckpt = capture(model, st, epoch, rng, hist, _norm_extras(train.norm))
        save_checkpoint(out / f"epoch{epoch:03d}.ckpt", ckpt)
        save_checkpoint(out / "last.ckpt", ckpt)
        e = hist.epochs[-1]
        print(f"epoch {e.epoch}: lr {e.lr:.4g} train_loss {e.train_loss:.4f} "
              f"train_acc {e.train_acc:.4f} val_acc {e.val_acc:.4f}", flush=True)

    history = train_epochs(model, train, val, schedule, cfg.train.epochs, rng, cfg.train.batch_size,
                           state, start, history, cfg.train.hflip, on_epoch)
    if history.epochs:
        print(f"final val_acc {history.epochs[-1].val_acc:.4f}; metrics in {out / 'metrics.csv'}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_config(ckpt.config, Rng(0))
    restore(model, ckpt)
    if "norm_mean" not in ckpt.extras:
        raise ConfigError("checkpoint carries no normalisation statistics")
    norm = Normalization(ckpt.extras["norm_mean"], ckpt.extras["norm_std"])
    d = _data_dir(args.data)
    if model.input_shape[0] == 1:
        ds = load_idx(*find_idx_pair(d, args.split), norm=norm, class_count=model.num_classes)
    else:
        name = "test_batch.bin" if args.split == "test" else "data_batch_1.bin"
        ds = load_cifar_binary(d / name, norm=norm, class_count=model.num_classes)
    acc = evaluate(model, ds, topk=(1, 5))
    print(f"checkpoint epoch {ckpt.epoch}; {len(ds)} {args.split} images")
    print(f"top-1 {acc[1]:.4f}")
    print(f"top-5 {acc[5]:.4f}")
    return 0


def _spec_from_flags(args) -> StageSpec:
    if args.backbone:
        base = BACKBONES[args.backbone]
        return StageSpec(args.blocks or base.blocks_per_stage, args.channels or base.channels_per_stage,
                         args.spatial or base.spatial_per_stage, base.name)
    if not args.blocks:
        raise ConfigError("pass --blocks or --backbone")
    return StageSpec(args.blocks, args.channels or (), args.spatial or ())


def cmd_plan(args) -> int:
    plan = plan_placement(_spec_from_flags(args), args.policy)
    print(plan.describe())
    for line in plan.describe_stages():
        print("  " + line)
    return 0


def cmd_account(args) -> int:
    spec = _spec_from_flags(args)
    steam = SteamConfig(d=args.d, heads=args.heads, m=args.m)
    report = account(spec, steam, args.policy, args.r, args.k)
    print(report.to_csv() if args.format == "csv" else report.to_text(), end="" if args.format == "csv" else "\n")
    return 0


def cmd_verify(args) -> int:
    start = time.perf_counter()
    ok = run_all()
    print(f"{'ALL PASS' if ok else 'FAILURES'} in {time.perf_counter() - start:.1f}s")
    return 0 if ok else 1


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    print("effective config: " + json.dumps(cfg.to_dict(), sort_keys=True))
    base = cfg.model.steam or SteamConfig()
    rows = []
    for field_name, value in ABLATION_AXES[args.axis]:
        steam = replace(base, **{field_name: value})
        rng = Rng(cfg.train.seed)
        train, val = load_splits(cfg, rng)
        model = build_model(replace(cfg.model, steam=steam), train.sample_shape, train.class_count, rng)
        start = time.perf_counter()
        hist = train_epochs(model, train, val, Schedule.scaled(cfg.train.lr, cfg.train.epochs),
                            cfg.train.epochs, rng, cfg.train.batch_size, hflip=cfg.train.hflip)
        last = hist.epochs[-1]
        rows.append((f"{field_name}={value}", model.steam_params, last.train_loss, last.val_acc,
                     time.perf_counter() - start))
        print(f"done {rows[-1][0]}", flush=True)
    print(f"\n{'variant':<28} {'STEAM params':>12} {'train loss':>10} {'val top-1':>9} {'seconds':>8}")
    for name, params, loss, acc, secs in rows:
        print(f"{name:<28} {params:>12} {loss:>10.4f} {acc:>9.4f} {secs:>8.1f}")
    return 0


# -- parser ------------------------------------------------------------------------------------


def _add_run_flags(p):
    p.add_argument("--config", help="YAML or JSON run config (flags override it)")
    p.add_argument("--data", help="dataset directory (default: $STEAM_DATA_DIR)")
    p.add_argument("--epochs", type=int, help="epoch budget")
    p.add_argument("--seed", type=int, help="seed for subsampling, init, shuffling and edge drop")
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--batch-size", type=int, help="minibatch size")
    p.add_argument("--train-size", type=int, help="stratified training subset size")
    p.add_argument("--val-size", type=int, help="stratified held-out subset size")


def _add_spec_flags(p):
    p.add_argument("--backbone", choices=sorted(BACKBONES), help="start from a built-in stage spec")
    p.add_argument("--blocks", type=_ints, help="blocks per stage, e.g. 3,4,6,3")
    p.add_argument("--channels", type=_ints, help="output channels per stage, e.g. 256,512,1024,2048")
    p.add_argument("--spatial", type=_spatial, help="spatial size per stage, e.g. 56,28,14,7")
    p.add_argument("--policy", default="adaptive", choices=PLACEMENT_POLICIES, help="placement policy")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="steam", description="STEAM attention toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a desk CNN and write metrics.csv plus checkpoints")
    _add_run_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--no-steam", action="store_true", help="train the plain backbone")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1/top-5 accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", help="dataset directory (default: $STEAM_DATA_DIR)")
    p.add_argument("--split", default="test", choices=("train", "test"), help="split to score")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plan", help="print the STEAM placement for a stage layout")
    _add_spec_flags(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("account", help="added parameters and FLOPs, with comparison rows")
    _add_spec_flags(p)
    p.add_argument("--d", type=int, default=8, help="attention width d")
    p.add_argument("--heads", type=int, default=4, help="attention heads")
    p.add_argument("--m", type=int, default=7, help="pooled grid size")
    p.add_argument("--r", type=float, help="SE/CBAM reduction ratio")
    p.add_argument("--k", type=int, help="CBAM spatial kernel size")
    p.add_argument("--format", default="text", choices=("text", "csv"), help="report format")
    p.set_defaults(func=cmd_account)

    p = sub.add_parser("verify", help="run oracle, gradient and invariant checks")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("ablate", help="train variants along one axis and compare")
    _add_run_flags(p)
    p.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES), help="axis to vary")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (SteamError, OSError, ValueError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"steam {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
