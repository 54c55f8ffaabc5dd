"""Command-line interface: ``degrade``, ``train``, ``eval``, ``infer`` and ``analyze``.

Option values are resolved as built-in defaults, then a JSON ``--config``
file, then explicit flags.  One ``--seed`` drives model initialisation, patch
sampling and degradation noise.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import checkpoint as ckpt_io
from .analysis import (
    ConvConfig,
    block_extent,
    closed_form_count,
    compression_ratio,
    format_table,
    gate_param_total,
    param_table,
    table_csv,
)
from .checkpoint import CheckpointError
from .data import DegradationConfig, PatchSampler, eval_pairs, from_unit, list_images, load_image, save_image
from .layers import receptive_extent
from .metrics import bicubic_predictor, evaluate, model_predictor
from .model import VARIANTS, ModelSpec, build_model
from .train import OptimState, fit

log = logging.getLogger("avrfn")

DEFAULTS: Dict[str, object] = {
    "seed": 0,
    "threads": 1,
    # model
    "variant": "avrfn",
    "groups": 3,
    "blocks": 6,
    "filters": 64,
    "scale": 4,
    "dilation_rates": [1, 2, 3],
    "reduction": 16,
    "init": "he_uniform",
    # degradation / sampling
    "noise_mean": 0.0,
    "noise_variance": 10.0,
    "no_noise": False,
    "lr_patch": 48,
    "batch_size": 16,
    # optimisation
    "epochs": 300,
    "steps_per_epoch": None,
    "lr": 1e-4,
    "weight_decay": 0.0,
    "checkpoint_every": None,
    # evaluation
    "border_crop": 0,
    "test_set": None,
}

MANIFEST_NAME = "manifest.json"


class CliError(Exception):
    pass


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--variant", type=str.lower, choices=[v.lower() for v in VARIANTS],
                   help="network variant (default: avrfn)")
    g.add_argument("--groups", type=int, help="residual groups g (default: 3)")
    g.add_argument("--blocks", type=int, help="residual blocks per group t (default: 6)")
    g.add_argument("--filters", type=int, help="feature channels F (default: 64)")
    g.add_argument("--dilation-rates", type=int, nargs="+", help="branch dilation rates (default: 1 2 3)")
    g.add_argument("--reduction", type=int, help="attention gate reduction (default: 16)")
    g.add_argument("--init", choices=["he_uniform", "glorot_uniform"], help="weight init (default: he_uniform)")


def _add_scale_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scale", type=int, choices=[2, 3, 4], help="upscale factor r (default: 4)")


def _add_noise_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("degradation")
    g.add_argument("--noise-mean", type=float, help="noise mean, 8-bit units (default: 0)")
    g.add_argument("--noise-variance", type=float, help="noise variance, 8-bit units (default: 10)")
    g.add_argument("--no-noise", action="store_true", default=None, help="bicubic downscale only")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file of option values (flags override it)")
    common.add_argument("--seed", type=int, help="seed for all randomness (default: 0)")
    common.add_argument("--threads", type=int, help="evaluation worker threads (default: 1)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="avrfn", description="Thermal image super-resolution toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("degrade", parents=[common], help="make LR images from an HR directory")
    p.add_argument("in_dir", type=Path, help="directory (or manifest file) of HR images")
    p.add_argument("out_dir", type=Path, help="output directory for LR images and manifest.json")
    _add_scale_flag(p)
    _add_noise_flags(p)

    p = sub.add_parser("train", parents=[common], help="train a model on HR images")
    p.add_argument("data_dir", type=Path, help="directory (or manifest file) of HR training images")
    p.add_argument("--out", type=Path, required=True, help="checkpoint path to write")
    p.add_argument("--loss-log", type=Path, help="loss CSV path (default: <out>.loss.csv)")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    _add_scale_flag(p)
    _add_model_flags(p)
    _add_noise_flags(p)
    g = p.add_argument_group("optimisation")
    g.add_argument("--epochs", type=int, help="training epochs (default: 300)")
    g.add_argument("--steps-per-epoch", type=int,
                   help="batches per epoch (default: enough batches to draw one patch per image)")
    g.add_argument("--lr", type=float, help="Adam learning rate (default: 1e-4)")
    g.add_argument("--weight-decay", type=float, help="L2 weight regularisation (default: 0)")
    g.add_argument("--lr-patch", type=int, help="LR patch side in pixels (default: 48)")
    g.add_argument("--batch-size", type=int, help="patches per batch (default: 16)")
    g.add_argument("--checkpoint-every", type=int, help="also save every N steps (default: end only)")

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint (or bicubic) on HR test images")
    p.add_argument("checkpoint", type=Path, nargs="?", help="model checkpoint (omit with --bicubic)")
    p.add_argument("data_dir", type=Path, help="directory (or manifest file) of HR test images")
    p.add_argument("--out", type=Path, required=True, help="metrics CSV to write")
    p.add_argument("--per-image", type=Path, help="optional per-image CSV")
    p.add_argument("--append", action="store_true", help="append a row to an existing metrics CSV")
    p.add_argument("--bicubic", action="store_true", help="score the bicubic-upscale baseline")
    p.add_argument("--test-set", type=str, help="test set label (default: data directory name)")
    p.add_argument("--border-crop", type=int, help="pixels cropped from each border before scoring (default: 0)")
    _add_scale_flag(p)
    _add_noise_flags(p)

    p = sub.add_parser("infer", parents=[common], help="super-resolve one LR image")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("image", type=Path, help="LR input image")
    p.add_argument("output", type=Path, help="SR output image (same bit depth as the input)")

    p = sub.add_parser("analyze", parents=[common], help="parameter table, receptive fields, compression ratios")
    _add_scale_flag(p)
    _add_model_flags(p)
    p.add_argument("--csv", type=Path, help="also write the per-layer table as CSV")
    return parser


def resolve(args: argparse.Namespace) -> Dict[str, object]:
    """Merge defaults, the config file and explicit flags."""
    opts = dict(DEFAULTS)
    if args.config is not None:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise CliError("config file must hold a JSON object")
        unknown = sorted(set(k.replace("-", "_") for k in cfg) - set(DEFAULTS))
        if unknown:
            raise CliError(f"unknown config keys: {', '.join(unknown)}")
        opts.update({k.replace("-", "_"): v for k, v in cfg.items()})
    for key, value in vars(args).items():
        if key in DEFAULTS and value is not None:
            opts[key] = value
    if opts["threads"] is not None and int(opts["threads"]) < 1:
        raise CliError("--threads must be >= 1")
    return opts


def model_spec(opts) -> ModelSpec:
    return ModelSpec(variant=str(opts["variant"]).upper(), groups=int(opts["groups"]), blocks=int(opts["blocks"]),
                     filters=int(opts["filters"]), scale=int(opts["scale"]),
                     dilation_rates=tuple(opts["dilation_rates"]), reduction=int(opts["reduction"]),
                     init=str(opts["init"]), seed=int(opts["seed"]))


def degradation(opts, scale: Optional[int] = None) -> DegradationConfig:
    return DegradationConfig(scale=int(scale if scale is not None else opts["scale"]),
                             noise_mean=float(opts["noise_mean"]), noise_variance=float(opts["noise_variance"]),
                             noise_enabled=not opts["no_noise"], lr_patch=int(opts["lr_patch"]),
                             batch_size=int(opts["batch_size"]), seed=int(opts["seed"]))


def _read_images(source: Path):
    if not source.exists():
        raise CliError(f"no such file or directory: {source}")
    images, failures = [], []
    for path in list_images(source):
        try:
            images.append((path.stem, load_image(path)))
        except (OSError, ValueError) as exc:
            failures.append(f"{path}: {exc}")
    return images, failures


def cmd_degrade(args, opts) -> int:
    cfg = degradation(opts)
    images, failures = _read_images(args.in_dir)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for pair, (image_id, img) in zip(eval_pairs(images, cfg), images):
        out = args.out_dir / f"{image_id}.png"
        try:
            save_image(from_unit(pair.lr, img.max_value), out)
        except (OSError, ValueError) as exc:
            failures.append(f"{out}: {exc}")
            continue
        written.append({"image": image_id, "file": out.name, "hr_size": [img.width, img.height],
                        "lr_size": [pair.lr.shape[1], pair.lr.shape[0]]})
    manifest = {"seed": cfg.seed, "config": cfg.to_dict(), "images": written}
    (args.out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for msg in failures:
        print(f"error: {msg}", file=sys.stderr)
    print(f"wrote {len(written)} LR images to {args.out_dir}")
    return 1 if failures else 0


def cmd_train(args, opts) -> int:
    images, failures = _read_images(args.data_dir)
    for msg in failures:
        print(f"error: {msg}", file=sys.stderr)
    if failures:
        return 1
    cfg = degradation(opts)
    sampler = PatchSampler(images, cfg)
    steps = opts["steps_per_epoch"] or max(1, math.ceil(len(sampler.images) / cfg.batch_size))
    loss_log = args.loss_log or args.out.with_name(args.out.name + ".loss.csv")
    resume = ckpt_io.load(args.resume) if args.resume else None
    optim = OptimState(lr=float(opts["lr"]), weight_decay=float(opts["weight_decay"]))
    res = fit(model_spec(opts), sampler, epochs=int(opts["epochs"]), steps_per_epoch=int(steps),
              seed=int(opts["seed"]), optim=optim, resume=resume,
              checkpoint_every=opts["checkpoint_every"], checkpoint_path=args.out, loss_log=loss_log,
              log_every=max(1, int(steps)))
    last = res.history[-1][2] if res.history else float("nan")
    print(f"trained {len(res.history)} steps; final mse {last:.6g}; checkpoint {args.out}")
    return 0


def cmd_eval(args, opts) -> int:
    if args.bicubic:
        scale = int(opts["scale"])
        predictor, params = bicubic_predictor(scale), 0
    else:
        if args.checkpoint is None:
            raise CliError("eval needs a checkpoint unless --bicubic is given")
        model = ckpt_io.model_from_checkpoint(ckpt_io.load(args.checkpoint))
        scale = model.spec.scale
        if args.scale is not None and args.scale != scale:
            raise CliError(f"scale mismatch: checkpoint is x{scale}, --scale {args.scale}")
        predictor, params = model_predictor(model), model.num_parameters()
    images, failures = _read_images(args.data_dir)
    for msg in failures:
        print(f"error: {msg}", file=sys.stderr)
    pairs = eval_pairs(images, degradation(opts, scale))
    label = opts["test_set"] or args.data_dir.stem
    rep = evaluate(predictor, pairs, scale, test_set=label, parameters=params, workers=int(opts["threads"]),
                   border_crop=int(opts["border_crop"]))
    rep.write_csv(args.out, per_image_path=args.per_image, append=args.append)
    print(f"{label} x{scale}: psnr {rep.psnr_mean:.4f} ssim {rep.ssim_mean:.4f} over {len(rep.rows)} images")
    return 1 if failures else 0


def cmd_infer(args, opts) -> int:
    model = ckpt_io.model_from_checkpoint(ckpt_io.load(args.checkpoint))
    img = load_image(args.image)
    sr = model_predictor(model)(np.clip(img.pixels / img.max_value, 0.0, 1.0))
    save_image(from_unit(sr, img.max_value), args.output)
    print(f"wrote {sr.shape[1]}x{sr.shape[0]} image to {args.output}")
    return 0


def analysis_report(spec: ModelSpec) -> List[str]:
    model = build_model(spec)
    rows = param_table(model)
    total = model.num_parameters()
    lines = [format_table(rows), ""]
    lines.append(f"total parameters: {total}")
    lines.append(f"closed-form count: {closed_form_count(spec)}")
    lines.append(f"attention gate parameters: {gate_param_total(spec)}")
    lines.append("")
    lines.append("theoretical receptive field (per axis)")
    for d in spec.block_dilations:
        lines.append(f"  3x3 conv, dilation {d}: {receptive_extent(3, d)}")
    lines.append(f"  one residual block: {block_extent(spec)}")
    lines.append("")
    lines.append("compression at matched receptive field")
    ref_a = ConvConfig(k=5, dilation=1, in_ch=100, out_ch=64)
    ref_b = ConvConfig(k=3, dilation=2, in_ch=100, out_ch=64)
    lines.append(f"  k=5 l=1 in=100 out=64 ({ref_a.params}) vs k=3 l=2 in=100 out=64 ({ref_b.params}): "
                 f"ratio {compression_ratio(ref_a, ref_b):.3f}")
    F = spec.filters
    for d in sorted(set(spec.block_dilations)):
        if d == 1:
            continue
        dense = ConvConfig(k=2 * d + 1, dilation=1, in_ch=F, out_ch=F)
        dil = ConvConfig(k=3, dilation=d, in_ch=F, out_ch=F)
        lines.append(f"  k={dense.k} l=1 vs k=3 l={d} at F={F} (extent {dil.extent}): "
                     f"ratio {compression_ratio(dense, dil):.3f}")
    lines.append("")
    lines.append("variant totals at this configuration")
    for v in VARIANTS:
        try:
            other = ModelSpec(**{**spec.to_dict(), "variant": v})
        except ValueError as exc:
            lines.append(f"  {v}: invalid ({exc})")
            continue
        n = closed_form_count(other)
        lines.append(f"  {v:<7}{n:>12}  ratio to {spec.variant}: {n / total:.4f}")
    return lines


def cmd_analyze(args, opts) -> int:
    spec = model_spec(opts)
    print("\n".join(analysis_report(spec)))
    if args.csv:
        args.csv.write_text(table_csv(param_table(build_model(spec))))
    return 0


COMMANDS = {"degrade": cmd_degrade, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "analyze": cmd_analyze}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve(args)
        return COMMANDS[args.command](args, opts)
    except (CliError, CheckpointError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
