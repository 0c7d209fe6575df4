"""Train, sample and evaluate the wavelet-conditioned latent diffusion super-resolver."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Any, Callable, Sequence

from qwsr import pipeline
from qwsr.common import QwsrError, Stage
from qwsr.config import RunConfig, load_config
from qwsr.dataset import load_image, save_png

LOG = logging.getLogger("")

_FLAG_TYPES: dict[str, Callable[[str], Any]] = {"int": int, "float": float, "str": str}


def _csv_list(kind: Callable[[str], Any]) -> Callable[[str], list[Any]]:
    def parse(text: str) -> list[Any]:
        try:
            return [kind(item) for item in text.split(",") if item.strip()]
        except ValueError as ex:
            raise argparse.ArgumentTypeError(f"Not a comma separated list: '{text}'") from ex

    return parse


def _bool_flag(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"Not a boolean: '{text}'")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One --<field> flag per RunConfig field; unset flags leave the file value."""
    group = parser.add_argument_group("run configuration")
    for field in RunConfig.__dataclass_fields__.values():
        flag = "--" + field.name.replace("_", "-")
        kind = _bool_flag if field.type == "bool" else _FLAG_TYPES[str(field.type)]
        group.add_argument(flag, dest=field.name, type=kind, default=None, help=f"default {field.default}")


def _add_training_flags(parser: argparse.ArgumentParser, stage: Stage) -> None:
    """Short spellings of the data, step count and checkpoint location of a stage."""
    parser.add_argument("--data", dest="data_dir", default=None, help="alias of --data-dir")
    parser.add_argument(
        "--steps", dest=f"{stage.value}_steps", type=int, default=None, help=f"alias of --{stage.value}-steps"
    )
    parser.add_argument(
        "--out", dest="checkpoint_out", help=f"checkpoint directory or path of {stage.checkpoint_name}"
    )


def _get_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser("qwsr", description=__doc__)
    parser.add_argument("--config", dest="config_file", help="INI file with a [run] section")
    parser.add_argument("-v", dest="verbose", action="store_true", help="increase output verbosity")
    commands = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text)
        _add_config_flags(sub)
        return sub

    sub = command("decompose", "write QWT planes, magnitude and phase maps and DWT sub-bands of an image")
    sub.add_argument("image", help="input image")
    sub.add_argument("out", help="output directory")
    sub.add_argument("--levels", type=int, default=1, help="decomposition levels")

    sub = command("make-pairs", "write degraded hr/ and lr/ PNG pairs of a data split")
    sub.add_argument("output", nargs="?", help="output directory")
    sub.add_argument("--out", dest="out_flag", help="output directory")
    sub.add_argument("--split", choices=["train", "val", "all"], default="val")
    sub.add_argument("--data", dest="data_dir", default=None, help="alias of --data-dir")
    sub.add_argument("--scale", dest="scale_factor", type=int, default=None, help="alias of --scale-factor")
    sub.add_argument("--sigma-blur", dest="blur_sigma", type=float, default=None, help="alias of --blur-sigma")
    sub.add_argument("--sigma-noise", dest="noise_sigma", type=float, default=None, help="alias of --noise-sigma")

    _add_training_flags(command("pretrain-quave", "train the wavelet embedding"), Stage.QUAVE)
    _add_training_flags(command("pretrain-vae", "train the autoencoder"), Stage.VAE)
    _add_training_flags(command("pretrain-unet", "train the denoiser backbone unconditionally"), Stage.UNET)
    sub = command("train", "train the conditioning encoder and denoiser head")
    sub.add_argument(
        "--pretrain-all", action="store_true", help="run every stage in order first"
    )
    _add_training_flags(sub, Stage.DIFFUSION)
    _add_training_flags(command("train-cfw", "train the decoder fusion module"), Stage.CFW)

    sub = command("sample", "super-resolve one LR image or every image of a directory")
    sub.add_argument("input", nargs="?", help="directory of LR images")
    sub.add_argument("output", nargs="?", help="output directory")
    sub.add_argument("--lr-image", help="single LR image, written to --out as PNG")
    sub.add_argument("--out", dest="out_flag", help="output PNG with --lr-image, else output directory")
    sub.add_argument("--reference", help="HR reference image, or directory of them, for metrics")
    sub.add_argument("--ckpt", help="checkpoint directory or any checkpoint file in it")
    sub.add_argument("--steps", dest="sample_steps", type=int, default=None, help="alias of --sample-steps")

    sub = command("eval", "PSNR_Y and SSIM_Y of SR images against HR images")
    sub.add_argument("hr", nargs="?", help="directory of HR images")
    sub.add_argument("sr", nargs="?", help="directory of SR images")
    sub.add_argument("--pairs", help="directory holding hr/ and sr/")
    sub.add_argument("--csv", "--out", dest="csv", help="per-image CSV output")

    sub = command("ablate-steps", "metrics and wall time per DDIM step count")
    sub.add_argument(
        "--steps-list", "--steps", dest="steps_list", type=_csv_list(int), default=[20, 50, 100, 200]
    )
    sub.add_argument("--csv", "--out", dest="csv", help="CSV output")
    sub.add_argument("--ckpt", help="checkpoint directory or any checkpoint file in it")

    sub = command("ablate-cfw", "metrics per decoder fusion coefficient")
    sub.add_argument("--w", dest="w_list", type=_csv_list(float), default=[0.0, 0.5, 1.0])
    sub.add_argument("--csv", "--out", dest="csv", help="CSV output")
    sub.add_argument("--ckpt", help="checkpoint directory or any checkpoint file in it")

    sub = command("probe-conditioning", "conditioning strength per timestep")
    sub.add_argument("image", nargs="?", help="LR image; default: the evaluation pairs of the data directory")
    sub.add_argument("--t", dest="t_list", type=_csv_list(int), default=[0, 250, 500, 750, 999])
    sub.add_argument("--csv", "--out", dest="csv", help="CSV output")
    sub.add_argument("--ckpt", help="checkpoint directory or any checkpoint file in it")
    return parser


_TRAIN_STAGES = {
    "pretrain-quave": [Stage.QUAVE],
    "pretrain-vae": [Stage.VAE],
    "pretrain-unet": [Stage.UNET],
    "train-cfw": [Stage.CFW],
}

_READS_DATA = {"make-pairs", "train", "ablate-steps", "ablate-cfw", *_TRAIN_STAGES}
_READS_CHECKPOINTS = {"sample", "ablate-steps", "ablate-cfw", "probe-conditioning"}


def _checkpoint_dir(path: str, stages: Sequence[Stage]) -> str:
    """Directory of a checkpoint location given as a directory or a checkpoint file."""
    name = os.path.basename(os.path.normpath(path))
    if not name.endswith(".ckpt"):
        return path
    expected = sorted(stage.checkpoint_name for stage in stages)
    if name not in expected:
        raise ValueError(f"Checkpoint file must be named one of {expected}, got '{name}'")
    return os.path.dirname(os.path.normpath(path)) or "."


def _output_dir_override(args: argparse.Namespace) -> str | None:
    if getattr(args, "checkpoint_out", None):
        stages = list(Stage) if getattr(args, "pretrain_all", False) else _command_stages(args.command)
        return _checkpoint_dir(args.checkpoint_out, stages)
    if getattr(args, "ckpt", None):
        return _checkpoint_dir(args.ckpt, list(Stage))
    return None


def _command_stages(command: str) -> list[Stage]:
    return _TRAIN_STAGES.get(command, [Stage.DIFFUSION])


def _one_of(flag: str | None, positional: str | None, what: str) -> str:
    if flag and positional and flag != positional:
        raise ValueError(f"Two different {what} given: '{positional}' and '{flag}'")
    if not (flag or positional):
        raise ValueError(f"No {what} given")
    return flag or positional


def _sample(args: argparse.Namespace, config: RunConfig) -> None:
    if args.lr_image:
        if args.input:
            raise ValueError("Give either an input directory or --lr-image, not both")
        out = _one_of(args.out_flag, args.output, "output path")
        reference = load_image(args.reference) if args.reference else None
        result = pipeline.run_sr(config, load_image(args.lr_image), reference, os.path.basename(out))
        save_png(out, result.image)
        if result.report is not None:
            print(
                f"PSNR_Y {result.report.psnr_db:.4f} dB  SSIM_Y {result.report.ssim:.4f}  "
                f"(bicubic {result.bicubic_report.psnr_db:.4f} dB)"
            )
        return
    if not args.input:
        raise ValueError("No input directory or --lr-image given")
    out = _one_of(args.out_flag, args.output, "output directory")
    pipeline.sample_directory(config, args.input, out, args.reference)


def _eval_dirs(args: argparse.Namespace) -> tuple[str, str]:
    if args.pairs:
        if args.hr or args.sr:
            raise ValueError("Give either --pairs or the hr and sr directories, not both")
        return os.path.join(args.pairs, "hr"), os.path.join(args.pairs, "sr")
    if not (args.hr and args.sr):
        raise ValueError("Need the hr and sr directories or --pairs")
    return args.hr, args.sr


def _required_csv(args: argparse.Namespace) -> str:
    if not args.csv:
        raise ValueError(f"{args.command} needs --csv or --out")
    return args.csv


def _run(args: argparse.Namespace, config: RunConfig) -> None:
    reads_data = args.command in _READS_DATA or (
        args.command == "probe-conditioning" and not args.image
    )
    config.check_paths(need_data=reads_data, need_checkpoints=args.command in _READS_CHECKPOINTS)
    if args.command == "decompose":
        energies = pipeline.decompose_image(
            load_image(args.image), args.out, args.levels, config.filter_family
        )
        for key, energy in energies.items():
            label = "DWT sub-band energy" if key.startswith("dwt_") else "detail magnitude energy"
            print(f"{key}: {label} {energy:.6g}")
    elif args.command == "make-pairs":
        pipeline.make_pairs(config, _one_of(args.out_flag, args.output, "output directory"), args.split)
    elif args.command in _TRAIN_STAGES:
        pipeline.run_training(config, _TRAIN_STAGES[args.command])
    elif args.command == "train":
        stages = list(Stage) if args.pretrain_all else [Stage.DIFFUSION]
        pipeline.run_training(config, stages)
    elif args.command == "sample":
        _sample(args, config)
    elif args.command == "eval":
        hr_dir, sr_dir = _eval_dirs(args)
        report = pipeline.evaluate_directory(hr_dir, sr_dir, args.csv, config.workers, config.eval_limit)
        print(f"PSNR_Y {report.psnr_db:.4f} dB  SSIM_Y {report.ssim:.4f}")
    elif args.command == "ablate-steps":
        pipeline.run_ablation_steps(config, args.steps_list, _required_csv(args))
    elif args.command == "ablate-cfw":
        pipeline.run_ablation_cfw(config, args.w_list, _required_csv(args))
    elif args.command == "probe-conditioning":
        image = load_image(args.image) if args.image else None
        rows = pipeline.probe_conditioning(config, args.t_list, image, args.csv)
        for t, strength in rows:
            print(f"t={t}: {strength:.6g}")


def main(argv: Sequence[str] | None = None) -> int:
    """Parse arguments, configure logging and run one command."""
    args = _get_arg_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)7s: %(message)s",
        stream=sys.stderr,
    )
    overrides = {
        name: getattr(args, name)
        for name in RunConfig.__dataclass_fields__
        if getattr(args, name, None) is not None
    }
    try:
        output_dir = _output_dir_override(args)
        if output_dir is not None:
            overrides["output_dir"] = output_dir
        config = load_config(args.config_file, overrides, os.environ)
        _run(args, config)
    except (QwsrError, ValueError, OSError) as ex:
        LOG.error("%s", ex)
        return 1
    LOG.info("Done...")
    return 0


if __name__ == "__main__":
    sys.exit(main())
