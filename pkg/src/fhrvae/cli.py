"""
Command-line entry point: fhrvae <command> [options]
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .config import RunConfig, RunConfigLoader, seed_overrides, write_resolved_config
from .errors import ConfigError, DataValidationError, FhrVaeError
from .formats import atomic_output_dir
from .pipeline import Pipeline, create_pipeline

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
COMMANDS = ("synth", "preprocess", "features", "train", "eval", "tc-sweep", "interpret")


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value configuration file")
    common.add_argument("--seed", type=int, help="Set every seed in the configuration")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override one configuration key (repeatable)",
    )
    common.add_argument("--out", type=Path, required=True, help="Output directory")
    common.add_argument("--threads", type=int, help="Worker threads for per-record stages")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--render", action="store_true", help="Also write plotly HTML figures")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fhrvae", description="Supervised VAE pipeline for fetal heart rate segments")
    commands = parser.add_subparsers(dest="command", required=True)
    common = _common_options()

    commands.add_parser("synth", parents=[common], help="Generate a synthetic CTG corpus")

    preprocess = commands.add_parser("preprocess", parents=[common], help="Clean, segment and split a corpus")
    preprocess.add_argument("--corpus", type=Path, required=True)

    for name, help_text in (
        ("features", "Extract clinical features per segment"),
        ("train", "Train a model on the training split"),
        ("tc-sweep", "Train one model per TC target and seed"),
    ):
        command = commands.add_parser(name, parents=[common], help=help_text)
        command.add_argument("--segments", type=Path, required=True)

    for name, help_text in (
        ("eval", "Score the test split and write metric reports"),
        ("interpret", "Analyse the latent space of a checkpoint"),
    ):
        command = commands.add_parser(name, parents=[common], help=help_text)
        command.add_argument("--checkpoint", type=Path, required=True)
        command.add_argument("--segments", type=Path, required=True)
        if name == "eval":
            command.add_argument("--corpus", type=Path, help="Raw corpus for the trace record")
    return parser


def parse_overrides(args: argparse.Namespace) -> Dict[str, str]:
    overrides: Dict[str, str] = {}
    if args.seed is not None:
        overrides.update(seed_overrides(args.seed))
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.threads is not None:
        overrides["threads"] = str(args.threads)
    return overrides


def _require(*paths: Optional[Path]) -> None:
    for path in paths:
        if path is not None and not path.exists():
            raise DataValidationError(f"input not found: {path}")


def run_command(args: argparse.Namespace, pipeline: Pipeline, out: Path) -> List[Path]:
    command = args.command
    if command == "synth":
        return pipeline.synth(out)
    if command == "preprocess":
        _require(args.corpus)
        return pipeline.preprocess(args.corpus, out)
    if command == "features":
        _require(args.segments)
        return pipeline.features(args.segments, out)
    if command == "train":
        _require(args.segments)
        return pipeline.train(args.segments, out)
    if command == "eval":
        _require(args.checkpoint, args.segments, args.corpus)
        return pipeline.evaluate(args.checkpoint, args.segments, out, args.corpus)
    if command == "tc-sweep":
        _require(args.segments)
        return pipeline.tc_sweep(args.segments, out)
    if command == "interpret":
        _require(args.checkpoint, args.segments)
        return pipeline.interpret(args.checkpoint, args.segments, out)
    raise ConfigError(f"unknown command: {command}")


def execute(args: argparse.Namespace) -> RunConfig:
    """Resolve the configuration and run one command into an atomic output directory."""
    config = RunConfigLoader(args.config).load(parse_overrides(args))
    pipeline = create_pipeline(config, args.render)
    with atomic_output_dir(args.out) as staging:
        run_command(args, pipeline, staging)
        write_resolved_config(config, staging)
    return config


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    try:
        execute(args)
    except FhrVaeError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
