"""Command-line surface: synth / train / eval / predict.

Every subcommand is deterministic under a fixed seed, exits 0 on success,
and prints a one-line diagnostic to stderr with a nonzero exit code on any
error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np
import torch

from .config import load_run_config
from .data import DatasetManifest, encode_gender, load_image, resize_keep_aspect, synth_generate
from .evaluation import evaluate, render_overlay
from .network import load_checkpoint
from .ordinal import decode_age_from_logits
from .training import run_training


def _cmd_synth(args) -> int:
    manifest = synth_generate(
        n=args.n,
        seed=args.seed,
        out_dir=args.out,
        image_size=args.image_size,
        age_range=(args.age_min, args.age_max),
        split=args.split,
    )
    print(f"wrote {len(manifest)} images and {Path(args.out) / 'manifest.tsv'}")
    return 0


def _cmd_train(args) -> int:
    run_cfg = load_run_config(args.config)
    train_cfg = run_cfg.train
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    manifest_path = args.manifest or run_cfg.data.manifest
    if not manifest_path:
        raise ValueError("no manifest given (config data.manifest or --manifest)")
    out_dir = args.out or run_cfg.data.out_dir
    manifest = DatasetManifest.load(manifest_path)

    every = max(1, train_cfg.iterations // 20)

    def progress(it, lr, breakdown):
        if it % every == 0 or it == train_cfg.iterations - 1:
            print(
                f"iter {it:6d}  lr {lr:.2e}  l_ord {breakdown.l_ord:.4f}  "
                f"l_ord_patch {breakdown.l_ord_patch:.4f}  l_rpn {breakdown.l_rpn:.4f}  "
                f"l_total {breakdown.l_total:.4f}"
            )

    result = run_training(train_cfg, run_cfg.model, manifest, out_dir, progress=progress)
    print(f"final checkpoint: {result.checkpoint_path}")
    print(f"metrics log: {result.metrics_path}")
    return 0


def _cmd_eval(args) -> int:
    report = evaluate(args.checkpoint, args.manifest, overlay_dir=args.overlay_dir)
    out = Path(args.out)
    report.to_json(out)
    ap_text = "n/a" if report.ap is None else f"{report.ap:.4f}/{report.ap50:.4f}/{report.ap75:.4f}"
    print(f"mae_months {report.mae_months:.3f}  ap/ap50/ap75 {ap_text}")
    print(f"report: {out}")
    return 0


def _cmd_predict(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    model.eval()
    image = load_image(args.image)
    image, _, _ = resize_keep_aspect(image, np.zeros((0, 2)), model.config.input_long_side)
    images = torch.from_numpy(image[None, None].astype(np.float32))
    genders = torch.tensor([encode_gender(args.gender)])
    with torch.no_grad():
        outputs = model(images, genders)
    age = float(decode_age_from_logits(outputs.age_logits)[0])
    print(f"predicted_age_months {age:.2f}")
    if outputs.proposals is not None:
        for x1, y1, x2, y2 in outputs.proposals[0]:
            print(f"roi {x1:.1f} {y1:.1f} {x2:.1f} {y2:.1f}")
    else:
        print("model has no detection branch; no ROI boxes to report")
    if args.render is not None:
        render_overlay(
            image, np.zeros((0, 4)),
            outputs.proposals[0] if outputs.proposals is not None else None,
            age, -1, args.render,
        )
        print(f"overlay: {args.render}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="alanet", description="Bone age assessment with anatomical ROI detection."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a deterministic synthetic dataset")
    p.add_argument("--n", type=int, required=True, help="number of images")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--age-min", type=int, default=0)
    p.add_argument("--age-max", type=int, default=228)
    p.add_argument("--split", default="train")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train from a YAML config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--out", default=None, help="override data.out_dir")
    p.add_argument("--manifest", default=None, help="override data.manifest")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default="report.json")
    p.add_argument("--overlay-dir", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict", help="predict age and ROIs for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--gender", required=True, choices=("female", "male"))
    p.add_argument("--render", default=None, help="write an overlay PNG here")
    p.set_defaults(func=_cmd_predict)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
