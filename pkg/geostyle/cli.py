#!/usr/bin/env python
"""CLI for geometric and texture style transfer and warp regressor training."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any

from pydantic import ValidationError

from geostyle.base import (
    ENV_BACKBONE_WEIGHTS,
    ArgumentError,
    AugmentPolicy,
    BackboneConfig,
    ExecutorType,
    FillPolicy,
    GeostyleError,
    PixelOptimizer,
    TrainConfig,
    TransferConfig,
    WarpKind,
    WarpMode,
    get_setting,
    load_config_file,
)

# Keys accepted in a --config file per subcommand (flag names with dashes as underscores)
TRANSFER_CONFIG_KEYS = {
    "content",
    "style",
    "geometry_style",
    "out",
    "warp",
    "levels",
    "iters",
    "alpha_over_beta",
    "step_size",
    "layer_weights",
    "optimizer",
    "affine_ckpt",
    "tps_ckpt",
    "seed",
    "fill",
    "emit_intermediates",
    "loss_log",
    "device",
    "backbone_weights",
}
TRAIN_CONFIG_KEYS = {
    "kind",
    "corpus",
    "out_ckpt",
    "affine_ckpt",
    "epochs",
    "seed",
    "batch_size",
    "lr",
    "image_size",
    "grid_size",
    "max_images",
    "augment",
    "style_bank",
    "log",
    "workers",
    "validation_fraction",
    "device",
    "backbone_weights",
}


def _parse_float_list(value: str) -> list[float]:
    return [float(v.strip()) for v in value.split(",") if v.strip()]


def _parse_int_list(value: str) -> list[int]:
    return [int(v.strip()) for v in value.split(",") if v.strip()]


def _merged(args: argparse.Namespace, allowed: set[str]) -> dict[str, Any]:
    """Config file values overridden by every flag given on the command line."""
    values: dict[str, Any] = {}
    if getattr(args, "config", None):
        values.update(load_config_file(args.config, allowed))
    for key in allowed:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return values


def _require(values: dict[str, Any], key: str) -> Any:
    if values.get(key) in (None, ""):
        raise ArgumentError(f"--{key.replace('_', '-')} is required (flag or config file)")
    return values[key]


def _optional_path(value: Any) -> Path | None:
    return Path(value) if value not in (None, "") else None


def _as(convert: Callable[[str], Any], value: Any) -> Any:
    # Config file values arrive as strings, flags already converted
    return convert(value) if isinstance(value, str) else value


def _backbone(values: dict[str, Any]) -> BackboneConfig:
    weights = values.get("backbone_weights") or get_setting(ENV_BACKBONE_WEIGHTS)
    return BackboneConfig(weights_path=_optional_path(weights), device=values.get("device"))


def _transfer_config(values: dict[str, Any]) -> TransferConfig:
    fields: dict[str, Any] = {}
    if "levels" in values:
        fields["pyramid_levels"] = _as(int, values["levels"])
    if "iters" in values:
        fields["iterations_per_level"] = _as(_parse_int_list, values["iters"])
    if "alpha_over_beta" in values:
        fields["alpha_over_beta"] = _as(float, values["alpha_over_beta"])
    if "step_size" in values:
        fields["step_size"] = _as(float, values["step_size"])
    if "layer_weights" in values:
        fields["layer_weights"] = _as(_parse_float_list, values["layer_weights"])
    if "optimizer" in values:
        fields["optimizer"] = PixelOptimizer(values["optimizer"])
    if "loss_log" in values:
        fields["loss_log_path"] = _optional_path(values["loss_log"])
    return TransferConfig(**fields)


def _run_transfer(args: argparse.Namespace) -> None:
    from geostyle.pipeline import JobSpec, run_transfer

    values = _merged(args, TRANSFER_CONFIG_KEYS)
    job = JobSpec(
        content_path=Path(_require(values, "content")),
        style_path=Path(_require(values, "style")),
        geometry_style_path=_optional_path(values.get("geometry_style")),
        output_path=Path(_require(values, "out")),
        warp_mode=WarpMode(values.get("warp", WarpMode.TPS)),
        affine_checkpoint=_optional_path(values.get("affine_ckpt")),
        tps_checkpoint=_optional_path(values.get("tps_ckpt")),
        transfer=_transfer_config(values),
        seed=_as(int, values.get("seed", 0)),
        fill=FillPolicy(values.get("fill", FillPolicy.REPLICATE)),
        emit_intermediates=_optional_path(values.get("emit_intermediates")),
        backbone=_backbone(values),
    )
    print(run_transfer(job))


def _run_train(args: argparse.Namespace) -> None:
    from geostyle.pipeline import run_train

    values = _merged(args, TRAIN_CONFIG_KEYS)
    fields: dict[str, Any] = {
        "corpus_path": Path(_require(values, "corpus")),
        "checkpoint_path": Path(_require(values, "out_ckpt")),
        "log_path": _optional_path(values.get("log")),
        "style_bank_path": _optional_path(values.get("style_bank")),
        "deterministic": not args.nondeterministic,
    }
    for key, field_name, convert in (
        ("epochs", "epochs", int),
        ("seed", "seed", int),
        ("batch_size", "batch_size", int),
        ("lr", "learning_rate", float),
        ("image_size", "image_size", int),
        ("grid_size", "grid_size", int),
        ("max_images", "max_images", int),
        ("workers", "num_workers", int),
        ("validation_fraction", "validation_fraction", float),
    ):
        if key in values:
            fields[field_name] = _as(convert, values[key])
    if "augment" in values:
        fields["augment_policy"] = AugmentPolicy(values["augment"])
    config = TrainConfig(**fields)

    checkpoint = run_train(
        WarpKind(_require(values, "kind")),
        config,
        affine_checkpoint=_optional_path(values.get("affine_ckpt")),
        backbone=_backbone(values),
    )
    print(checkpoint)


def _run_evaluate(args: argparse.Namespace) -> None:
    from geostyle.pipeline import run_evaluate

    report = run_evaluate(
        corpus_path=args.corpus,
        affine_checkpoint=args.affine_ckpt,
        tps_checkpoint=args.tps_ckpt,
        pairs=args.pairs,
        seed=args.seed,
        image_size=args.image_size,
        max_images=args.max_images,
        backbone=_backbone(vars(args)),
    )
    summary = report.summary()
    if args.json:
        per_pair = {"identity": report.identity, "affine": report.affine, "cascade": report.cascade}
        print(json.dumps({**summary, "per_pair": per_pair}, indent=2))
        return
    for key, value in summary.items():
        print(f"{key}: {value:.4f}" if isinstance(value, float) else f"{key}: {value}")


def _run_prepare_bank(args: argparse.Namespace) -> None:
    from geostyle.pipeline import run_prepare_bank

    config = _transfer_config({k: v for k, v in vars(args).items() if v is not None})
    results = run_prepare_bank(
        corpus_path=args.corpus,
        style_paths=args.styles,
        out_dir=args.out_dir,
        config=config,
        image_size=args.image_size,
        max_images=args.max_images,
        max_workers=args.workers,
        executor=ExecutorType(args.executor),
        backbone=_backbone(vars(args)),
    )
    failed = [r for r in results if not r.success]
    for r in failed:
        print(f"Warning: {r.path.name} failed: {r.error}", file=sys.stderr)
    written = len(results) - len(failed)
    print(f"{written} of {len(results)} style bank entries written to {args.out_dir}")
    if failed:
        sys.exit(1)


def _add_device_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--device",
        type=str,
        default=None,
        help="Torch device: cpu, cuda, cuda:N or auto (or GEOSTYLE_DEVICE env var)",
    )
    parser.add_argument(
        "--backbone-weights",
        type=str,
        default=None,
        help="VGG-19 state dict file (or GEOSTYLE_BACKBONE_WEIGHTS env var)",
    )


def _add_transfer_parser(subparsers: Any) -> None:
    parser = subparsers.add_parser("transfer", help="Transfer geometric and texture style")
    parser.add_argument("--content", type=str, default=None, help="Content image")
    parser.add_argument("--style", type=str, default=None, help="Texture style image")
    parser.add_argument(
        "--geometry-style",
        type=str,
        default=None,
        help="Geometry style image (default: the texture style image)",
    )
    parser.add_argument("--out", type=str, default=None, help="Output PNG path")
    parser.add_argument(
        "--warp",
        type=str,
        choices=[m.value for m in WarpMode],
        default=None,
        help="Warp mode: tps (default, affine then TPS), affine, none",
    )
    parser.add_argument("--levels", type=int, default=None, help="Pyramid levels (default: 3)")
    parser.add_argument(
        "--iters",
        type=_parse_int_list,
        default=None,
        help="Iterations per level, finest first (default: 100,200,300)",
    )
    parser.add_argument(
        "--alpha-over-beta",
        type=float,
        default=None,
        help="Texture over content weight ratio (default: 5e-3)",
    )
    parser.add_argument(
        "--optimizer",
        type=str,
        choices=[o.value for o in PixelOptimizer],
        default=None,
        help="Pixel optimizer: adam (default), lbfgs",
    )
    parser.add_argument("--affine-ckpt", type=str, default=None, help="Affine regressor checkpoint")
    parser.add_argument("--tps-ckpt", type=str, default=None, help="TPS regressor checkpoint")
    parser.add_argument("--seed", type=int, default=None, help="Random seed (default: 0)")
    parser.add_argument(
        "--fill",
        type=str,
        choices=[f.value for f in FillPolicy],
        default=None,
        help="Out-of-image fill for the warp: replicate (default), zeros, reflect",
    )
    parser.add_argument(
        "--emit-intermediates",
        type=str,
        default=None,
        metavar="DIR",
        help="Write warped content, per-level images and warp parameters to DIR",
    )
    parser.add_argument(
        "--loss-log", type=str, default=None, help="Append level,iter,total,texture,content lines"
    )
    parser.add_argument("--config", type=Path, default=None, help="key = value config file")
    _add_device_args(parser)
    parser.set_defaults(handler=_run_transfer)


def _add_train_parser(subparsers: Any) -> None:
    parser = subparsers.add_parser("train", help="Train a warp regressor on synthetic warps")
    parser.add_argument(
        "--kind", type=str, choices=[k.value for k in WarpKind], default=None, help="affine or tps"
    )
    parser.add_argument("--corpus", type=str, default=None, help="Directory of PNG/JPEG photos")
    parser.add_argument("--out-ckpt", type=str, default=None, help="Checkpoint to write")
    parser.add_argument(
        "--affine-ckpt", type=str, default=None, help="Trained affine checkpoint (tps only)"
    )
    parser.add_argument("--epochs", type=int, default=None, help="Epochs (default: 3)")
    parser.add_argument("--seed", type=int, default=None, help="Random seed (default: 0)")
    parser.add_argument("--batch-size", type=int, default=None, help="Batch size (default: 8)")
    parser.add_argument("--lr", type=float, default=None, help="Learning rate (default: 1e-3)")
    parser.add_argument("--max-images", type=int, default=None, help="Use at most N images")
    parser.add_argument(
        "--augment",
        type=str,
        choices=[a.value for a in AugmentPolicy],
        default=None,
        help="Texture augmentation: jitter (default), none, style_bank",
    )
    parser.add_argument("--style-bank", type=str, default=None, help="Prepared style bank dir")
    parser.add_argument("--log", type=str, default=None, help="Append epoch,batch,loss lines")
    parser.add_argument("--workers", type=int, default=None, help="Data loader workers")
    parser.add_argument(
        "--nondeterministic",
        action="store_true",
        help="Allow nondeterministic kernels and parallel data loading",
    )
    parser.add_argument("--config", type=Path, default=None, help="key = value config file")
    _add_device_args(parser)
    parser.set_defaults(handler=_run_train)


def _add_evaluate_parser(subparsers: Any) -> None:
    parser = subparsers.add_parser("evaluate", help="Score regressors on synthetic pairs")
    parser.add_argument("--corpus", type=Path, required=True, help="Directory of held-out photos")
    parser.add_argument("--affine-ckpt", type=Path, required=True, help="Affine checkpoint")
    parser.add_argument("--tps-ckpt", type=Path, default=None, help="TPS checkpoint")
    parser.add_argument("--pairs", type=int, default=50, help="Synthetic pairs (default: 50)")
    parser.add_argument("--seed", type=int, default=1000, help="Pair seed (default: 1000)")
    parser.add_argument("--image-size", type=int, default=240, help="Image side (default: 240)")
    parser.add_argument("--max-images", type=int, default=None, help="Use at most N images")
    parser.add_argument("--json", action="store_true", help="Output as JSON")
    _add_device_args(parser)
    parser.set_defaults(handler=_run_evaluate)


def _add_prepare_bank_parser(subparsers: Any) -> None:
    parser = subparsers.add_parser("prepare-bank", help="Render the style bank for training")
    parser.add_argument("--corpus", type=Path, required=True, help="Directory of PNG/JPEG photos")
    parser.add_argument("--styles", type=Path, nargs="+", required=True, help="Style images")
    parser.add_argument("--out-dir", type=Path, required=True, help="Bank directory to write")
    parser.add_argument("--image-size", type=int, default=240, help="Image side (default: 240)")
    parser.add_argument("--max-images", type=int, default=None, help="Use at most N images")
    parser.add_argument("--levels", type=int, default=None, help="Pyramid levels (default: 3)")
    parser.add_argument(
        "--iters", type=_parse_int_list, default=None, help="Iterations per level, finest first"
    )
    parser.add_argument(
        "--workers",
        type=int,
        default=1,
        help="Number of parallel workers (default: 1, sequential)",
    )
    parser.add_argument(
        "--executor",
        type=str,
        choices=[e.value for e in ExecutorType],
        default="thread",
        help="Executor type for parallel rendering: thread (default), process",
    )
    _add_device_args(parser)
    parser.set_defaults(handler=_run_prepare_bank)


def _setup_parser() -> argparse.ArgumentParser:
    """Set up argument parser with all subcommands."""
    parser = argparse.ArgumentParser(
        prog="geostyle", description="Geometric and texture style transfer"
    )
    parser.add_argument(
        "--log-level",
        type=str,
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        default="WARNING",
        help="Logging level (default: WARNING)",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    _add_transfer_parser(subparsers)
    _add_train_parser(subparsers)
    _add_evaluate_parser(subparsers)
    _add_prepare_bank_parser(subparsers)
    return parser


def main(argv: Sequence[str] | None = None) -> None:
    parser = _setup_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        args.handler(args)
    except GeostyleError as e:
        print(f"Error [{e.category}]: {e}", file=sys.stderr)
        sys.exit(1)
    except ValidationError as e:
        message = "; ".join(err["msg"] for err in e.errors())
        print(f"Error [config]: {message}", file=sys.stderr)
        sys.exit(1)
    except ValueError as e:
        print(f"Error [argument]: {e}", file=sys.stderr)
        sys.exit(1)
    except OSError as e:
        print(f"Error [io]: {e}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
