"""Command-line interface.

Subcommands: synth, shapes, pretrain-detector, train, dehaze, guidance, eval,
ablate.  Every subcommand accepts --config <json> plus flag overrides and
--seed.  Exit codes: 0 success, 1 runtime failure (one-line diagnostic on
stderr), 2 usage error.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np
import torch

from . import evaluation, guidance as gmod, hazegen, shapes, training
from . import manifest as mio
from .detector import DetectorConfig, freeze, pretrain_detector
from .network import DehazeNet, NetworkConfig


def _config_args(parser):
    parser.add_argument("--config", help="flat JSON config file")
    parser.add_argument("--seed", type=int, help="override the config seed")


def _load_train_config(args, extra_overrides=None):
    overrides = dict(extra_overrides or {})
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.config:
        return training.load_config(args.config, overrides)
    return training.config_from_dict(overrides)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dgdehaze",
        description="Detection-guided dehazing: synthesis, training, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="materialize a hazy corpus from clean images")
    _config_args(p)
    p.add_argument("--manifest", required=True, help="clean-image manifest (JSONL)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--beta", type=float, help="fixed haze thickness")
    p.add_argument("--beta-low", type=float, default=hazegen.TRAIN_BETA_RANGE[0])
    p.add_argument("--beta-high", type=float, default=hazegen.TRAIN_BETA_RANGE[1])
    p.add_argument("--airlight", type=float, default=0.5)

    p = sub.add_parser("shapes", help="generate the toy shapes corpus")
    _config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--size", type=int, default=64)

    p = sub.add_parser("pretrain-detector", help="train and freeze the grid detector")
    _config_args(p)
    p.add_argument("--manifest", required=True, help="clean annotated corpus")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--steps", type=int, default=500)

    p = sub.add_parser("train", help="train the dehazer against a frozen detector")
    _config_args(p)
    p.add_argument("--manifest", required=True, help="clean annotated corpus")
    p.add_argument("--detector", required=True, help="detector checkpoint")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", type=int, help="override steps_per_epoch (epochs=1)")

    p = sub.add_parser("dehaze", help="restore an image or directory of images")
    _config_args(p)
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--out", required=True, help="output file or directory")
    p.add_argument("--model", help="dehazer checkpoint (omit for identity-init net)")
    p.add_argument("--detector", help="detector checkpoint for guidance "
                                      "(omit for zero guidance)")

    p = sub.add_parser("guidance", help="render detector guidance masks as 16-bit PNG")
    _config_args(p)
    p.add_argument("--detector", required=True)
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--out", required=True, help="output file or directory")
    p.add_argument("--conf", type=float, default=0.25)
    p.add_argument("--nms", type=float, default=0.45)

    p = sub.add_parser("eval", help="evaluate a dehazer over a hazy corpus")
    _config_args(p)
    p.add_argument("--manifest", required=True, help="hazy corpus manifest")
    p.add_argument("--detector", required=True)
    p.add_argument("--model", help="dehazer checkpoint (omit for identity pass-through)")
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--csv", help="write the per-image CSV here")

    p = sub.add_parser("ablate", help="run the ablation variant suite")
    _config_args(p)
    p.add_argument("--manifest", required=True, help="clean training corpus")
    p.add_argument("--eval-manifest", required=True, help="hazy eval corpus")
    p.add_argument("--detector", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", nargs="+",
                   default=["full", "no_stage2", "no_fusion", "no_attention",
                            "mse_loss", "no_det_loss"])
    p.add_argument("--lambdas", nargs="*", type=float, default=[],
                   help="additional lambda sweep values")
    p.add_argument("--steps", type=int, help="override steps_per_epoch (epochs=1)")
    return parser


def _iter_images(path):
    if os.path.isdir(path):
        names = sorted(n for n in os.listdir(path)
                       if n.lower().endswith((".png", ".jpg", ".jpeg")))
        return [(os.path.join(path, n), n) for n in names]
    return [(path, os.path.basename(path))]


def _out_path(out, name, single, suffix=".png"):
    if single and not os.path.isdir(out):
        return out
    os.makedirs(out, exist_ok=True)
    return os.path.join(out, os.path.splitext(name)[0] + suffix)


def cmd_synth(args):
    seed = args.seed if args.seed is not None else 0
    if args.beta is not None:
        lo = hi = args.beta
    else:
        lo, hi = args.beta_low, args.beta_high
    policy = hazegen.HazePolicy(beta_low=lo, beta_high=hi,
                                atmospheric_light=args.airlight, seed=seed)
    path = hazegen.build_dataset(args.manifest, policy, args.out)
    print(path)
    return 0


def cmd_shapes(args):
    seed = args.seed if args.seed is not None else 0
    spec = shapes.ShapesSceneSpec(canvas_size=args.size, seed=seed)
    path = shapes.make_shapes_dataset(spec, args.n, args.out)
    print(path)
    return 0


def cmd_pretrain_detector(args):
    seed = args.seed if args.seed is not None else 0
    config = DetectorConfig(steps=args.steps, seed=seed)
    result = pretrain_detector(args.manifest, config, args.out)
    print(result.checkpoint_path)
    return 0


def cmd_train(args):
    overrides = {}
    if args.steps is not None:
        overrides.update(epochs=1, steps_per_epoch=args.steps)
    config = _load_train_config(args, overrides)
    result = training.train_dehazer(config, args.manifest, args.detector, args.out)
    print(result.checkpoint_path)
    return 0


def cmd_dehaze(args):
    config = _load_train_config(args)
    if args.model:
        model = training.load_dehazer(args.model)
    else:
        torch.manual_seed(config.seed)
        model = DehazeNet(config.network_config())
        model.eval()
    det = freeze(args.detector) if args.detector else None
    fn = training.make_dehaze_fn(model)
    images = _iter_images(args.input)
    for src, name in images:
        img = mio.load_image(src)
        h, w = img.shape[:2]
        if det is not None:
            dets = det.predict(img, config.conf_threshold, config.nms_iou)
            mask = gmod.normalize_guidance(
                gmod.render_guidance(dets, h, w, det.num_classes))
        else:
            mask = gmod.GuidanceMask(values=np.zeros((h, w), dtype=np.float32),
                                     num_classes=1)
        restored = fn(img, mask, None)
        dst = _out_path(args.out, name, single=len(images) == 1)
        mio.save_image(dst, restored)
        print(dst)
    return 0


def cmd_guidance(args):
    det = freeze(args.detector)
    images = _iter_images(args.input)
    for src, name in images:
        img = mio.load_image(src)
        h, w = img.shape[:2]
        dets = det.predict(img, args.conf, args.nms)
        mask = gmod.normalize_guidance(
            gmod.render_guidance(dets, h, w, det.num_classes))
        dst = _out_path(args.out, name, single=len(images) == 1)
        gmod.save_mask_png(mask, dst)
        print(dst)
    return 0


def cmd_eval(args):
    config = _load_train_config(args)
    det = freeze(args.detector)
    if args.model:
        model = training.load_dehazer(args.model)
        fn = training.make_dehaze_fn(model)
    else:
        fn = lambda hazy, mask, meta: hazy  # identity pass-through
    report = evaluation.evaluate(fn, det, args.manifest, config.conf_threshold,
                                 config.nms_iou, csv_path=args.csv)
    print(report.to_table())
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(report.to_json())
    return 0


def cmd_ablate(args):
    overrides = {}
    if args.steps is not None:
        overrides.update(epochs=1, steps_per_epoch=args.steps)
    config = _load_train_config(args, overrides)
    variants = list(args.variants) + [f"lambda={v}" for v in args.lambdas]
    rows = training.run_ablation(config, variants, args.manifest,
                                 args.eval_manifest, args.detector, args.out)
    print(training.format_ablation_table(rows))
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "shapes": cmd_shapes,
    "pretrain-detector": cmd_pretrain_detector,
    "train": cmd_train,
    "dehaze": cmd_dehaze,
    "guidance": cmd_guidance,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
