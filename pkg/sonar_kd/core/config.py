"""Configuration and CLI argument parsing for sonar-kd.

Every subcommand may read a flat ``key=value`` file through ``--config``; its values become the
sub-parser defaults, so flags given on the command line still win. Commands that write outputs
leave a ``run_config.txt`` snapshot in the same format, which replays the run when passed back.
"""

import argparse
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from sonar_kd.errors import ConfigError, MissingFileError
from sonar_kd.protocols import RunConfig

# Detection defaults
DEFAULT_SCORE_THRESH = 0.3
DEFAULT_NMS_IOU = 0.45
DEFAULT_EVAL_IOU = 0.5

# Data defaults
DEFAULT_SIGMA = 0.5 * 255
DEFAULT_IMAGE_SIZE = 64
DEFAULT_NUM_IMAGES = 200

# Optimization defaults
DEFAULT_LR = 0.01
DEFAULT_ITERS = 200
DEFAULT_BATCH_SIZE = 8
DEFAULT_KD_WEIGHT = 0.5

SNAPSHOT_NAME = "run_config.txt"
COMMANDS = ("make-dataset", "train", "dump-logits", "eval", "eval-video", "infer")

_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off")


def _add_seed(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0, help="Random seed (default: 0)")


def _add_detection_thresholds(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--score-thresh",
        type=float,
        default=DEFAULT_SCORE_THRESH,
        help=f"Drop detections scoring below this (default: {DEFAULT_SCORE_THRESH})",
    )
    parser.add_argument(
        "--nms-iou",
        type=float,
        default=DEFAULT_NMS_IOU,
        help=f"IoU above which same-class boxes are suppressed (default: {DEFAULT_NMS_IOU})",
    )


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--preset", choices=["nano", "l"], default="nano", help="Model size preset (default: nano)")
    parser.add_argument("--vit", choices=["on", "off"], default="off", help="Insert the ViT block after SPP (default: off)")
    parser.add_argument("--vit-heads", type=int, default=4, help="Attention heads in the ViT block (default: 4)")
    parser.add_argument("--vit-layers", type=int, default=1, help="Encoder layers in the ViT block (default: 1)")
    parser.add_argument("--vit-patch", type=int, default=1, help="ViT patch size on the stride-32 map (default: 1)")
    parser.add_argument("--no-pos-embed", action="store_true", help="Disable the learned positional embedding")
    parser.add_argument(
        "--base-channels",
        type=int,
        default=16,
        help="Channels of the first stage before the width multiplier (default: 16; 64 is full scale)",
    )
    parser.add_argument(
        "--base-depth",
        type=int,
        default=1,
        help="Blocks per CSP stage before the depth multiplier (default: 1; 3 is full scale)",
    )
    parser.add_argument("--num-classes", type=int, default=1, help="Number of object classes (default: 1)")
    parser.add_argument("--dtype", choices=["float64", "float32"], default="float64", help="Parameter precision")


def build_parser() -> argparse.ArgumentParser:
    """The full command-line surface: one sub-parser per pipeline step."""
    parser = argparse.ArgumentParser(
        prog="sonar-kd",
        description="Sonar wall detection with offline knowledge distillation",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file providing defaults for this command")
    common.add_argument("-v", "--verbose", action="store_true", help="Enable debug logging")

    make = sub.add_parser("make-dataset", parents=[common], help="Synthesize or import, augment and split a dataset")
    _add_seed(make)
    make.add_argument("--sigma", type=float, default=DEFAULT_SIGMA, help=f"Noise std in intensity units (default: {DEFAULT_SIGMA})")
    make.add_argument("--out", required=True, help="Output dataset directory")
    make.add_argument("--num-images", type=int, default=DEFAULT_NUM_IMAGES, help="Synthetic images to generate")
    make.add_argument("--size", type=int, default=DEFAULT_IMAGE_SIZE, help="Square image size (default: 64)")
    make.add_argument("--wall-ratio", type=float, default=0.5, help="Share of synthetic images with a wall")
    make.add_argument("--import-dir", help="Import PNG/PGM images with same-stem annotation files instead")
    make.add_argument("--no-expand", action="store_true", help="Skip the noise/flip/noise-flip expansion")
    make.add_argument("--image-format", choices=["png", "pgm"], default="png", help="Image file format")

    train = sub.add_parser("train", parents=[common], help="Train a detector, optionally distilling from teacher logits")
    _add_seed(train)
    _add_model_flags(train)
    train.add_argument("--dataset", required=True, help="Dataset directory written by make-dataset")
    train.add_argument("--out", required=True, help="Checkpoint directory")
    train.add_argument("--no-aug", action="store_true", help="Disable online random augmentation")
    train.add_argument("--kd", action="store_true", help="Distill from stored teacher logits (needs --teacher-logits)")
    train.add_argument("--teacher-logits", help="Logit store written by dump-logits")
    train.add_argument("--iters", type=int, default=DEFAULT_ITERS, help=f"Training iterations (default: {DEFAULT_ITERS})")
    train.add_argument("--lr", type=float, default=DEFAULT_LR, help=f"SGD learning rate (default: {DEFAULT_LR})")
    train.add_argument("--momentum", type=float, default=0.0, help="SGD momentum (default: 0)")
    train.add_argument("--weight-decay", type=float, default=0.0, help="L2 weight decay (default: 0)")
    train.add_argument("--clip-norm", type=float, help="Clip gradients to this global norm")
    train.add_argument("--batch-size", type=int, default=DEFAULT_BATCH_SIZE, help="Images per iteration")
    train.add_argument("--log-every", type=int, default=10, help="Log cadence in iterations")
    train.add_argument("--lambda-bbox", type=float, default=DEFAULT_KD_WEIGHT, help="Weight of the box KD term")
    train.add_argument("--lambda-obj", type=float, default=DEFAULT_KD_WEIGHT, help="Weight of the objectness KD term")
    train.add_argument("--lambda-cls", type=float, default=DEFAULT_KD_WEIGHT, help="Weight of the class KD term")
    train.add_argument("--kd-mode", choices=["additive", "blend"], default="additive", help="How hard and soft losses combine")
    train.add_argument("--blend", type=float, default=0.5, help="Hard-loss share in blend mode")
    train.add_argument("--kd-normalization", choices=["sum", "mean"], default="sum", help="KD loss normalization")
    train.add_argument("--temperature", type=float, default=1.0, help="Class KD temperature (default: 1, off)")

    dump = sub.add_parser("dump-logits", parents=[common], help="Store teacher FPN logits for a dataset split")
    dump.add_argument("--checkpoint", required=True, help="Teacher checkpoint directory")
    dump.add_argument("--dataset", required=True, help="Dataset directory")
    dump.add_argument("--split", choices=["train", "val", "test"], default="train", help="Split to dump (default: train)")
    dump.add_argument("--out", required=True, help="Logit store directory")
    dump.add_argument("--batch-size", type=int, default=DEFAULT_BATCH_SIZE, help="Images per forward pass")

    evaluate = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint or prediction files on a split")
    evaluate.add_argument("--checkpoint", help="Checkpoint directory")
    evaluate.add_argument("--predictions", help="Directory of <image id>.txt prediction files instead of a model")
    evaluate.add_argument("--dataset", required=True, help="Dataset directory")
    evaluate.add_argument("--split", choices=["train", "val", "test"], default="test", help="Split (default: test)")
    evaluate.add_argument("--iou", type=float, default=DEFAULT_EVAL_IOU, help="Matching IoU (default: 0.5)")
    evaluate.add_argument("--label", help="Row label in the report")
    evaluate.add_argument("--out", help="Directory for report.csv / report.json / report.txt")
    _add_detection_thresholds(evaluate)

    video = sub.add_parser("eval-video", parents=[common], help="Frame-share video metrics over a frame directory")
    video.add_argument("--checkpoint", required=True, help="Checkpoint directory")
    video.add_argument("--frames", required=True, help="Directory of frame images (optional same-stem annotations)")
    video.add_argument("--gt-timeline", required=True, help="File of '<frame> <0|1>' wall-presence lines")
    video.add_argument("--iou", type=float, default=DEFAULT_EVAL_IOU, help="Matching IoU for annotated frames")
    video.add_argument("--label", help="Row label in the report")
    video.add_argument("--out", help="Directory for the report files")
    _add_detection_thresholds(video)

    infer = sub.add_parser("infer", parents=[common], help="Detect walls in a single image")
    infer.add_argument("--checkpoint", required=True, help="Checkpoint directory")
    infer.add_argument("--image", required=True, help="PNG or PGM image")
    infer.add_argument("--out", required=True, help="Prediction file to write")
    infer.add_argument("--annotated", help="Also write a PNG with the boxes drawn")
    _add_detection_thresholds(infer)

    return parser


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise ConfigError(f"unknown command {command!r}", {"command": command})


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """Parse ``key=value`` lines; ``#`` comments and blank lines are ignored, keys accept ``-`` or ``_``."""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value", {"path": source, "line": lineno})
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key", {"path": source, "line": lineno})
        values[key.replace("-", "_")] = value
    return values


def read_config_file(path: Union[str, Path]) -> Dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"config file not found: {path}", {"path": str(path)})
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))


def _apply_file_defaults(sub: argparse.ArgumentParser, values: Dict[str, str], source: str) -> None:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults: Dict[str, object] = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None:
            raise ConfigError(f"{source}: unknown key {key!r}", {"path": source, "key": key})
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            lowered = raw.lower()
            if lowered not in _TRUE + _FALSE:
                raise ConfigError(f"{source}: {key} must be a boolean", {"key": key, "value": raw})
            defaults[key] = lowered in _TRUE
            continue
        try:
            value = action.type(raw) if action.type is not None else raw
        except ValueError as exc:
            raise ConfigError(f"{source}: invalid value for {key}: {raw!r}", {"key": key, "value": raw}) from exc
        if action.choices is not None and value not in action.choices:
            raise ConfigError(
                f"{source}: {key} must be one of {sorted(action.choices)}",
                {"key": key, "value": raw, "choices": sorted(action.choices)},
            )
        defaults[key] = value
        # Required flags are satisfied by the file.
        action.required = False
    sub.set_defaults(**defaults)


def parse_args(argv: Optional[Sequence[str]] = None) -> RunConfig:
    """Parse command line arguments, layering an optional config file under the flags."""
    parser = build_parser()
    args_list = list(argv) if argv is not None else None
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(args_list)
    if known.config and known.command in COMMANDS:
        _apply_file_defaults(_subparser(parser, known.command), read_config_file(known.config), known.config)

    args = parser.parse_args(args_list)

    # Create a RunConfig instance with the parsed values
    cfg = RunConfig()
    for key, value in vars(args).items():
        setattr(cfg, key, value)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    """Cross-flag checks argparse cannot express."""
    if cfg.command == "train":
        if cfg.kd and not cfg.teacher_logits:
            raise ConfigError("--kd requires --teacher-logits", {"flag": "--kd"})
        if cfg.teacher_logits and not cfg.kd:
            raise ConfigError("--teacher-logits is only used with --kd", {"flag": "--teacher-logits"})
    if cfg.command == "eval" and bool(cfg.checkpoint) == bool(cfg.predictions):
        raise ConfigError("eval needs exactly one of --checkpoint or --predictions")


def command_keys(command: str) -> List[str]:
    """Destinations of a subcommand's options, in declaration order."""
    sub = _subparser(build_parser(), command)
    return [a.dest for a in sub._actions if a.dest not in ("help", "config", "verbose")]


def config_items(cfg: RunConfig) -> List[Tuple[str, str]]:
    items = []
    for key in command_keys(cfg.command):
        value = getattr(cfg, key, None)
        if value is None:
            continue
        if isinstance(value, bool):
            value = "true" if value else "false"
        items.append((key, str(value)))
    return items


def format_snapshot(cfg: RunConfig) -> str:
    lines = [f"# sonar-kd {cfg.command}"] + [f"{key}={value}" for key, value in config_items(cfg)]
    return "\n".join(lines) + "\n"


def write_snapshot(cfg: RunConfig, directory: Union[str, Path]) -> Path:
    """Write the resolved configuration next to a command's outputs."""
    path = Path(directory) / SNAPSHOT_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_snapshot(cfg), encoding="utf-8")
    return path
