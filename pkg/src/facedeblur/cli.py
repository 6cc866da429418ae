"""Command-line entry point exposing every pipeline stage.

Exit codes: 0 on success, 1 on a contract violation or unusable input file
(one diagnostic line on stderr), 2 on malformed flags (usage text). Inputs
are never modified; identical invocations with identical inputs and seeds
produce bit-identical outputs.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import classifier as classifier_mod
from . import eval_harness, imaging, metrics, mining, network, trainer
from .components import BlockMatchingFlow, MeanShapeLocalizer, NccTracker, TemplateDetector
from .errors import ContractViolation

ENV_CONFIG = "FACEDEBLUR_CONFIG"


def positive_float(text: str) -> float:
    value = float(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return value


def nonneg_float(text: str) -> float:
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return value


def positive_int(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return value


def odd_int(text: str) -> int:
    value = int(text)
    if value <= 0 or value % 2 == 0:
        raise argparse.ArgumentTypeError(f"must be odd and positive, got {text}")
    return value


def fraction(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {text}")
    return value


def _coerce_channels(image: np.ndarray, channels: int) -> np.ndarray:
    if channels == 1:
        return metrics.to_luma(image)
    if image.ndim == 2:
        return np.repeat(image[:, :, None], 3, axis=2)
    return image


def _load_images(args, channels: int, resize: int | None = None):
    """Dataset images from --data or synthesized from --synth."""
    if args.data:
        paths = eval_harness.list_image_files(args.data)
        if not paths:
            raise ContractViolation(f"no images found in {args.data}")
        images = [_coerce_channels(imaging.read_image(p), channels) for p in paths]
        ids = [p.stem for p in paths]
    else:
        images = trainer.generate_patterns(args.synth, size=args.synth_size, seed=args.seed)
        if channels == 3:
            images = [_coerce_channels(img, 3) for img in images]
        ids = [f"synth{idx:04d}" for idx in range(len(images))]
    if resize:
        images = [imaging.bilinear_resize(img, resize, resize) for img in images]
    return images, ids


def _make_kernel_from_args(parser, args) -> np.ndarray:
    if args.kernel_file:
        return imaging.load_kernel(args.kernel_file)
    if args.kind == "gaussian":
        if args.sigma is None:
            parser.error("--kind gaussian requires --sigma")
        size = args.size or 2 * math.ceil(3.0 * args.sigma) + 1
        return imaging.make_gaussian_kernel(args.sigma, size)
    if args.kind == "motion":
        if args.length is None:
            parser.error("--kind motion requires --length")
        return imaging.make_motion_kernel(args.length, args.angle)
    parser.error("need --kernel-file or --kind")


def _arch_from_args(args) -> network.NetArchitecture:
    if args.arch not in network.ARCH_PRESETS:
        raise ContractViolation(
            f"unknown architecture preset {args.arch!r}; choose from {sorted(network.ARCH_PRESETS)}"
        )
    arch = network.ARCH_PRESETS[args.arch]
    overrides = {}
    for flag, fieldname in (
        ("blocks", "block_count"),
        ("channels", "channels_per_block"),
        ("in_channels", "input_channels"),
        ("out_channels", "output_channels"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[fieldname] = value
    if getattr(args, "skip_sources", None):
        overrides["skip_sources"] = tuple(int(s) for s in args.skip_sources.split(","))
    if getattr(args, "input_skip", None) is not None:
        overrides["input_skip"] = args.input_skip
    if overrides:
        from dataclasses import replace

        arch = replace(arch, **overrides)
    return arch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="facedeblur",
        description="Face deblurring toolkit: blur synthesis, training, mining, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("kernel", help="generate a blur kernel file")
    p.add_argument("--kind", choices=("gaussian", "motion"), required=True)
    p.add_argument("--sigma", type=positive_float)
    p.add_argument("--size", type=odd_int)
    p.add_argument("--length", type=positive_int)
    p.add_argument("--angle", type=float, default=0.0, help="radians")
    p.add_argument("--out", required=True)

    p = sub.add_parser("blur", help="apply the blur model to an image")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kernel-file")
    p.add_argument("--kind", choices=("gaussian", "motion"))
    p.add_argument("--sigma", type=positive_float)
    p.add_argument("--size", type=odd_int)
    p.add_argument("--length", type=positive_int)
    p.add_argument("--angle", type=float, default=0.0)
    p.add_argument("--noise-sigma", type=nonneg_float, default=0.0)
    p.add_argument("--psi", choices=tuple(m.value for m in imaging.Psi), default="identity")
    p.add_argument("--levels", type=positive_int, help="levels for clip_quantize")
    p.add_argument("--mode", choices=("same", "valid"), default="same")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bit-depth", type=int, choices=(8, 16), default=8)

    p = sub.add_parser("train", help="train the network on sharp images")
    p.add_argument("--data", help="directory of sharp images")
    p.add_argument("--synth", type=positive_int, default=500, help="synthesize N sharp patterns instead")
    p.add_argument("--synth-size", type=positive_int, default=32)
    p.add_argument("--resize", type=positive_int)
    p.add_argument("--arch", default="desk")
    p.add_argument("--blocks", type=positive_int)
    p.add_argument("--channels", type=positive_int)
    p.add_argument("--in-channels", type=positive_int)
    p.add_argument("--out-channels", type=positive_int)
    p.add_argument("--skip-sources", help="comma-separated block indices")
    p.add_argument("--config", help=f"key = value config file (default: ${ENV_CONFIG})")
    p.add_argument("--batch-size", type=positive_int)
    p.add_argument("--lr", type=positive_float)
    p.add_argument("--lr-decay-factor", type=float)
    p.add_argument("--lr-decay-every", type=positive_int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--single-pass", action=argparse.BooleanOptionalAction)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma-min", type=positive_float)
    p.add_argument("--sigma-max", type=positive_float)
    p.add_argument("--motion-min", type=positive_int)
    p.add_argument("--motion-max", type=positive_int)
    p.add_argument("--gaussian-size", type=odd_int)
    p.add_argument("--noise-sigma", type=nonneg_float)
    p.add_argument("--kernel-family", choices=("both", "gaussian", "motion"))
    p.add_argument("--checkpoint-every", type=positive_int)
    p.add_argument("--log")
    p.add_argument("--out", required=True, help="final checkpoint path")

    p = sub.add_parser("deblur", help="deblur one image with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bit-depth", type=int, choices=(8, 16), default=8)

    p = sub.add_parser("eval-self", help="blur/deblur/score a sharp set")
    p.add_argument("--model", required=True)
    p.add_argument("--data")
    p.add_argument("--synth", type=positive_int, default=70)
    p.add_argument("--synth-size", type=positive_int, default=32)
    p.add_argument("--resize", type=positive_int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma-min", type=positive_float, default=1.0)
    p.add_argument("--sigma-max", type=positive_float, default=2.0)
    p.add_argument("--kernel-size", type=odd_int)
    p.add_argument("--noise-sigma", type=nonneg_float, default=0.0)
    p.add_argument("--report", help="write the text table here")
    p.add_argument("--csv", help="write per-item records here")
    p.add_argument("--composites", help="directory for GT|blurred|deblurred grids")

    p = sub.add_parser("sim-motion", help="simulate motion blur from a frame directory")
    p.add_argument("--frames", required=True)
    p.add_argument("--window", type=odd_int, default=7)
    p.add_argument("--min-motion", type=positive_float, default=1.0)
    p.add_argument("--no-min-motion", action="store_true")
    p.add_argument("--min-psnr", type=float, default=15.0)
    p.add_argument("--no-min-psnr", action="store_true")
    p.add_argument("--block-size", type=positive_int, default=8)
    p.add_argument("--search-radius", type=positive_int, default=7)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("score", help="score method output directories against ground truth")
    p.add_argument("--outputs", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", help="also write the table here")

    p = sub.add_parser("mine", help="run the frame-mining pipeline on a video's frames")
    p.add_argument("--frames", required=True, help="directory of numbered frame images")
    p.add_argument("--template", help="face template image for the detector")
    p.add_argument("--init-box", help="x0,y0,x1,y1 crop of frame 1 used as the template")
    p.add_argument("--classifier", help="trained fitting-classifier file (default: accept all)")
    p.add_argument("--landmarks", type=positive_int, default=68)
    p.add_argument("--detector-threshold", type=fraction, default=0.5)
    p.add_argument("--search-radius", type=positive_int, default=10)
    p.add_argument("--block-size", type=positive_int, default=8)
    p.add_argument("--overlap-threshold", type=fraction, default=0.5)
    p.add_argument("--min-frames-fraction", type=fraction, default=0.5)
    p.add_argument("--min-motion", type=positive_float, default=1.0)
    p.add_argument("--discard-moving", action="store_true",
                   help="flip the motion gate: discard clips moving above the threshold")
    p.add_argument("--out", required=True, help="manifest path")
    p.add_argument("--ledger", help="per-frame decision ledger (JSON lines)")

    p = sub.add_parser("train-classifier", help="train the landmark fitting classifier")
    p.add_argument("--frames", required=True, help="directory of positive images")
    p.add_argument("--manifest", required=True, help="manifest mapping frame index to landmarks")
    p.add_argument("--perturbation-sigma", type=positive_float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patch-side", type=positive_int, default=16)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="compare analytic gradients to finite differences")
    p.add_argument("--arch", default="small")
    p.add_argument("--blocks", type=positive_int)
    p.add_argument("--channels", type=positive_int)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--step", type=positive_float, default=1e-5)
    p.add_argument("--size", type=positive_int, default=8)
    p.add_argument("--tolerance", type=positive_float, default=1e-4)

    return parser


# ---------------------------------------------------------------------------
# Command bodies
# ---------------------------------------------------------------------------


def _cmd_kernel(parser, args) -> int:
    if args.kind == "gaussian":
        if args.sigma is None or args.size is None:
            parser.error("--kind gaussian requires --sigma and --size")
        kernel = imaging.make_gaussian_kernel(args.sigma, args.size)
    else:
        if args.length is None:
            parser.error("--kind motion requires --length")
        kernel = imaging.make_motion_kernel(args.length, args.angle)
    imaging.save_kernel(args.out, kernel)
    print(f"wrote {kernel.shape[0]}x{kernel.shape[1]} kernel to {args.out}")
    return 0


def _cmd_blur(parser, args) -> int:
    image = imaging.read_image(args.input)
    kernel = _make_kernel_from_args(parser, args)
    psi = imaging.Psi(args.psi)
    cfg = imaging.BlurConfig(
        noise_sigma=args.noise_sigma,
        psi=psi,
        psi_levels=args.levels,
        conv_mode=imaging.ConvMode.SAME if args.mode == "same" else imaging.ConvMode.VALID,
        rng_seed=args.seed,
    )
    imaging.write_image(args.out, np.clip(imaging.blur(image, kernel, cfg), 0.0, 1.0),
                        bit_depth=args.bit_depth)
    print(f"wrote blurred image to {args.out}")
    return 0


def _train_config_from_args(args) -> trainer.TrainConfig:
    cfg = trainer.TrainConfig(max_steps=1000)
    config_path = args.config or os.environ.get(ENV_CONFIG)
    if config_path:
        cfg = trainer.parse_train_config(config_path, base=cfg)
    from dataclasses import replace

    overrides = {}
    mapping = {
        "batch_size": "batch_size",
        "lr": "lr_initial",
        "lr_decay_factor": "lr_decay_factor",
        "lr_decay_every": "lr_decay_every",
        "max_steps": "max_steps",
        "single_pass": "single_pass",
        "gaussian_size": "gaussian_size",
        "noise_sigma": "noise_sigma",
        "kernel_family": "kernel_family",
        "checkpoint_every": "checkpoint_every",
        "log": "log_path",
    }
    for flag, fieldname in mapping.items():
        value = getattr(args, flag)
        if value is not None:
            overrides[fieldname] = value
    overrides["seed"] = args.seed
    sigma = list(cfg.sigma_range)
    if args.sigma_min is not None:
        sigma[0] = args.sigma_min
    if args.sigma_max is not None:
        sigma[1] = args.sigma_max
    overrides["sigma_range"] = tuple(sigma)
    motion = list(cfg.motion_length_range)
    if args.motion_min is not None:
        motion[0] = args.motion_min
    if args.motion_max is not None:
        motion[1] = args.motion_max
    overrides["motion_length_range"] = tuple(motion)
    if overrides.get("checkpoint_every"):
        overrides["checkpoint_path"] = args.out
    return replace(cfg, **overrides)


def _cmd_train(parser, args) -> int:
    arch = _arch_from_args(args)
    cfg = _train_config_from_args(args)
    images, _ = _load_images(args, arch.input_channels, resize=args.resize)
    store, history = trainer.train(images, arch, cfg)
    network.save_checkpoint(args.out, store, arch, seed=cfg.seed)
    if history:
        first = history[0][1]
        last = history[-1][1]
        print(f"trained {len(history)} steps; loss {first:.6f} -> {last:.6f}")
    else:
        print("trained 0 steps; wrote initialized parameters")
    print(f"wrote checkpoint to {args.out}")
    return 0


def _cmd_deblur(parser, args) -> int:
    store, arch, _ = network.load_checkpoint(args.model)
    image = _coerce_channels(imaging.read_image(args.input), arch.input_channels)
    restored = eval_harness.deblur_image(image, store, arch)
    imaging.write_image(args.out, restored, bit_depth=args.bit_depth)
    print(f"wrote deblurred image to {args.out}")
    return 0


def _cmd_eval_self(parser, args) -> int:
    store, arch, _ = network.load_checkpoint(args.model)
    images, ids = _load_images(args, arch.input_channels, resize=args.resize)
    cfg = eval_harness.SelfEvalConfig(
        sigma_range=(args.sigma_min, args.sigma_max),
        kernel_size=args.kernel_size,
        noise_sigma=args.noise_sigma,
    )
    summary = eval_harness.self_evaluation(images, store, arch, cfg, seed=args.seed, item_ids=ids)
    table = summary.to_text()
    print(table, end="")
    if args.report:
        Path(args.report).write_text(table)
    if args.csv:
        eval_harness.write_eval_csv(args.csv, summary)
    if args.composites:
        out_dir = Path(args.composites)
        out_dir.mkdir(parents=True, exist_ok=True)
        for idx, (sharp, item_id) in enumerate(zip(images, ids)):
            blurred = eval_harness.synthetic_blur(sharp, cfg, args.seed, idx)
            deblurred = eval_harness.deblur_image(blurred, store, arch)
            grid = eval_harness.comparison_grid(sharp, blurred, deblurred)
            suffix = ".pgm" if grid.ndim == 2 else ".ppm"
            imaging.write_image(out_dir / f"{item_id}{suffix}", grid)
    return 0


def _cmd_sim_motion(parser, args) -> int:
    paths = eval_harness.list_image_files(args.frames)
    frames = [imaging.read_image(p) for p in paths]
    cfg = eval_harness.SimBlurConfig(
        frames_to_average=args.window,
        min_pair_motion=None if args.no_min_motion else args.min_motion,
        min_psnr_keep=None if args.no_min_psnr else args.min_psnr,
    )
    flow = BlockMatchingFlow(block_size=args.block_size, search_radius=args.search_radius)
    pairs = eval_harness.simulate_motion_blur(frames, cfg, flow)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for pair in pairs:
        suffix = ".pgm" if pair.blurred.ndim == 2 else ".ppm"
        imaging.write_image(out_dir / f"blurred_{pair.start_index:05d}{suffix}",
                            np.clip(pair.blurred, 0, 1))
        imaging.write_image(out_dir / f"gt_{pair.start_index:05d}{suffix}", pair.ground_truth)
    print(f"kept {len(pairs)} window(s) from {len(frames)} frames")
    return 0


def _cmd_score(parser, args) -> int:
    scores = eval_harness.score_external(args.outputs, args.truth)
    table = eval_harness.format_score_table(scores)
    print(table, end="")
    for s in scores:
        if s.unmatched:
            print(f"{s.method}: {len(s.unmatched)} unmatched file(s): {', '.join(s.unmatched)}",
                  file=sys.stderr)
    if args.out:
        Path(args.out).write_text(table)
    return 0


def _cmd_mine(parser, args) -> int:
    paths = eval_harness.list_image_files(args.frames)
    if not paths:
        raise ContractViolation(f"no frames found in {args.frames}")
    frames = [imaging.read_image(p) for p in paths]
    if args.template:
        template = imaging.read_image(args.template)
    elif args.init_box:
        x0, y0, x1, y1 = (float(v) for v in args.init_box.split(","))
        template = frames[0][int(y0) : int(y1), int(x0) : int(x1)]
    else:
        parser.error("mine needs --template or --init-box")
    detector = TemplateDetector(template, threshold=args.detector_threshold)
    components = mining.ComponentSet(
        detector=detector,
        tracker=NccTracker(search_radius=args.search_radius),
        landmark_localizer=MeanShapeLocalizer(landmark_count=args.landmarks),
        optical_flow=BlockMatchingFlow(block_size=args.block_size),
    )
    if args.classifier:
        fitter = classifier_mod.FittingClassifier.load(args.classifier)
    else:
        fitter = classifier_mod.AcceptAllClassifier()
    cfg = mining.MiningConfig(
        overlap_threshold=args.overlap_threshold,
        min_frames_fraction=args.min_frames_fraction,
        min_avg_motion=args.min_motion,
        discard_moving=args.discard_moving,
    )
    result = mining.run_pipeline(frames, components, fitter, cfg)
    mining.write_manifest(args.out, result)
    if args.ledger:
        mining.write_ledger(args.ledger, result)
    print(mining.summary_text(result), end="")
    return 0


def _cmd_train_classifier(parser, args) -> int:
    paths = eval_harness.list_image_files(args.frames)
    entries = mining.read_manifest(args.manifest)
    positives = []
    for frame_index, shape in entries:
        if frame_index < 0 or frame_index >= len(paths):
            raise ContractViolation(
                f"manifest frame index {frame_index} outside directory of {len(paths)} images"
            )
        positives.append((imaging.read_image(paths[frame_index]), shape))
    params = classifier_mod.DescriptorParams(patch_side=args.patch_side)
    fitter = classifier_mod.train_fitting_classifier(
        positives,
        perturbation_sigma=args.perturbation_sigma,
        negatives_seed=args.seed,
        params=params,
    )
    fitter.save(args.out)
    print(f"trained fitting classifier on {len(positives)} positives; wrote {args.out}")
    return 0


def _cmd_gradcheck(parser, args) -> int:
    arch = _arch_from_args(args)
    worst = network.gradient_check(arch, seed=args.seed, height=args.size,
                                   width=args.size, step=args.step)
    print(f"max relative gradient error: {worst:.3e}")
    if worst >= args.tolerance:
        print(f"gradient check FAILED (tolerance {args.tolerance:g})", file=sys.stderr)
        return 1
    return 0


_COMMANDS = {
    "kernel": _cmd_kernel,
    "blur": _cmd_blur,
    "train": _cmd_train,
    "deblur": _cmd_deblur,
    "eval-self": _cmd_eval_self,
    "sim-motion": _cmd_sim_motion,
    "score": _cmd_score,
    "mine": _cmd_mine,
    "train-classifier": _cmd_train_classifier,
    "gradcheck": _cmd_gradcheck,
}


def dispatch(argv) -> int:
    """Parse argv and run one command, mapping failures to exit codes."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](parser, args)
    except SystemExit as exc:  # parser.error() inside a command body
        return int(exc.code or 0)
    except (ContractViolation, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
