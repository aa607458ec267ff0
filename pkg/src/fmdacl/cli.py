"""Command-line interface: dataset generation, training, evaluation, prediction.

This is the only module that writes to the console; library modules
communicate through return values and ``logging``. Every command exits 0 on
success and nonzero with a single ``error: <message>`` line on stderr
otherwise.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import config as config_mod
from . import data as data_mod
from .metrics import MetricAccumulator
from .trainer import Trainer


def _parse_sets(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def cmd_gen_data(args) -> int:
    counts = data_mod.gen_synthetic(
        args.out, n=args.n, h=args.size, w=args.size, seed=args.seed,
        labeled_frac=args.labeled_frac, val_frac=args.val_frac,
        test_frac=args.test_frac)
    total = sum(counts.values())
    print(f"wrote {total} images to {args.out} "
          f"({args.size}x{args.size}, seed {args.seed})")
    for split in data_mod.SPLITS:
        print(f"  {split}: {counts[split]}")
    return 0


def _resolved_run_config(args):
    cfg = config_mod.resolve_config(args.config, _parse_sets(args.set))
    data_root = args.data or cfg["data.root"]
    out_dir = args.out or cfg["run.out"]
    if not data_root:
        raise ValueError("no dataset root: pass --data or set data.root")
    if not out_dir:
        raise ValueError("no output directory: pass --out or set run.out")
    cfg["data.root"] = data_root
    cfg["run.out"] = out_dir
    return cfg, data_root, out_dir


def cmd_train(args) -> int:
    cfg, data_root, out_dir = _resolved_run_config(args)
    if args.resume:
        trainer = Trainer.from_checkpoint(args.resume)
    else:
        trainer = Trainer(config_mod.to_train_config(cfg),
                          config_mod.to_backbone_spec(cfg, "f1"),
                          config_mod.to_backbone_spec(cfg, "f2"),
                          config_mod.to_policy(cfg))
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.resolved.txt"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write(config_mod.format_config(cfg))

    def progress(row):
        print(f"epoch {row['epoch']}: total={row['total']:.4f} "
              f"val_dsc={row['val_dsc']:.2f} val_score={row['val_score']:.2f}")

    result = trainer.fit(data_root, out_dir, resume_from=args.resume,
                         stop_after=args.stop_after, progress=progress)
    best = result["best"]
    print(f"done: {result['epochs_run']} epochs; best epoch {best['epoch']} "
          f"(val_score={best['score']:.2f}, val_dsc={best['dsc']:.2f})")
    print(f"checkpoints: {result['best_path']} (best), {result['last_path']} (last)")
    return 0


def cmd_eval(args) -> int:
    trainer = Trainer.from_checkpoint(args.checkpoint)
    records = [r for r in data_mod.load_manifest(args.data) if r.split == args.split]
    if not records:
        raise ValueError(f"no records with split '{args.split}' in {args.data}")
    if args.split == "unlabeled":
        raise ValueError("cannot evaluate on the unlabeled split (no ground truth)")
    tolerance = args.nsd_tol if args.nsd_tol is not None \
        else trainer.config.nsd_tolerance_px
    acc = MetricAccumulator(trainer.f1_spec.c_seg, tolerance_px=tolerance)
    size = trainer.policy.target_size
    for rec in records:
        img = data_mod.resize_image(data_mod.read_image(rec.image_path), size)
        gt = data_mod.resize_mask(data_mod.read_mask(rec.mask_path), size)
        masks, bits = trainer.predict([img])
        acc.update(masks[0], gt, bits[0], rec.labels, rec.id)
    out_csv = args.out or os.path.join(
        os.path.dirname(os.path.abspath(args.checkpoint)), f"eval_{args.split}.csv")
    rep = acc.write_csv(out_csv, s_time=args.s_time)
    print(f"eval[{args.split}] {rep.summary()}")
    print(f"report: {out_csv}")
    return 0


def cmd_predict(args) -> int:
    trainer = Trainer.from_checkpoint(args.checkpoint)
    images_dir = args.images
    if os.path.isdir(os.path.join(images_dir, "images")):
        images_dir = os.path.join(images_dir, "images")
    names = sorted(f for f in os.listdir(images_dir) if f.endswith(".png"))
    if not names:
        raise ValueError(f"no .png images under {images_dir}")
    os.makedirs(os.path.join(args.out, "masks"), exist_ok=True)
    rows = []
    for name in names:
        rid = name[:-len(".png")]
        img = data_mod.read_image(os.path.join(images_dir, name))
        masks, bits = trainer.predict([img])
        data_mod.write_mask(os.path.join(args.out, "masks", name), masks[0])
        rows.append([rid] + [str(int(b)) for b in bits[0]])
    data_mod._write_csv(os.path.join(args.out, "labels.csv"),
                        ["id"] + [f"c{k}" for k in range(data_mod.K_CLS)], rows)
    print(f"predicted {len(names)} images -> {args.out}/masks, {args.out}/labels.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fmdacl",
        description="Semi-supervised dual-agreement co-training for joint "
                    "segmentation and multi-label classification.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a deterministic synthetic dataset")
    g.add_argument("--n", type=int, required=True, help="number of images")
    g.add_argument("--size", type=int, default=64, help="square image size (default 64)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--labeled-frac", type=float, default=0.2)
    g.add_argument("--val-frac", type=float, default=0.1)
    g.add_argument("--test-frac", type=float, default=0.1)
    g.add_argument("--out", required=True, help="dataset root to create")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run the co-training regimen")
    t.add_argument("--config", help="key=value config file (see config module)")
    t.add_argument("--data", help="dataset root (overrides data.root)")
    t.add_argument("--out", help="run directory (overrides run.out)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    t.add_argument("--resume", help="checkpoint to resume from (continues its epoch count)")
    t.add_argument("--stop-after", type=int, default=None,
                   help="checkpoint and stop after this many epochs (staged runs)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset root")
    e.add_argument("--split", default="val", choices=["labeled", "val", "test"])
    e.add_argument("--nsd-tol", type=float, default=None,
                   help="NSD tolerance in pixels (default: checkpoint config value)")
    e.add_argument("--s-time", type=float, default=0.0,
                   help="time score term in [0,100] (default 0)")
    e.add_argument("--out", help="report CSV path (default: next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="run f1-only inference over a directory of PNGs")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--images", required=True,
                   help="directory of .png images (or a dataset root)")
    r.add_argument("--out", required=True, help="output directory")
    r.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    seed_env = os.environ.get(config_mod.SEED_ENV_VAR)
    if seed_env and args.command == "gen-data":
        args.seed = int(seed_env)
    try:
        return args.func(args)
    except Exception as e:  # one machine-parsable line, nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
