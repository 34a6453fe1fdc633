"""Parse the command line arguments."""

from __future__ import annotations

import argparse
import sys

from pathlib import Path
from typing import TYPE_CHECKING, NoReturn

from levit_mc.cascade import BENIGN_THRESHOLD
from levit_mc.data import BENIGN_NAME, TRAIN_FRACTION, SynthSpec
from levit_mc.evaluation import BenchConfig
from levit_mc.train import TrainConfig
from levit_mc.utils import default_workers

from .version_builder import version_builder


if TYPE_CHECKING:
    from collections.abc import Sequence


USAGE_EXIT = 1
# Subcommands that accept `--key=value` config overrides.
OVERRIDABLE = ("train", "bench", "eval")


class HelpFormatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawTextHelpFormatter):
    """Keep description line breaks and show every default.

    Flags that defer to the config layers default to None; their help text
    names the effective default itself.
    """

    def _get_help_string(self, action: argparse.Action) -> str | None:
        if action.default is None:
            return action.help
        return super()._get_help_string(action)


class ArgumentParser(argparse.ArgumentParser):
    """Argument parser that reports usage errors with exit code 1."""

    def error(self, message: str) -> NoReturn:
        """Print the usage and exit.

        Args:
            message: The problem found.
        """
        self.print_usage(sys.stderr)
        self.exit(USAGE_EXIT, f"{self.prog}: error: {message}\n")


def _common(workers: int = 1) -> ArgumentParser:
    common = ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument(
        "-v",
        "--verbose",
        action="count",
        default=0,
        help="Log progress; repeat for debug output.",
    )
    common.add_argument(
        "--seed",
        type=int,
        default=None,
        help="Seed for every random choice; falls back to $LMCK_SEED, then 0.",
    )
    common.add_argument(
        "--workers",
        type=int,
        default=workers,
        help="Worker threads.",
    )
    return common


def _config_option(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--config",
        type=Path,
        default=None,
        help=(
            "YAML file with `densenet`, `levit`, `train` and `bench` sections.\n"
            "Any field can also be set with --key=value or --section.key=value."
        ),
    )


def _add_convert(subparsers: argparse._SubParsersAction[ArgumentParser]) -> None:
    parser = subparsers.add_parser(
        "convert",
        help="Render executables as PNG images.",
        description="Render a file, or every file under a directory, as RGB PNG images\n"
        "and write a manifest.jsonl next to them.",
        parents=[_common()],
        formatter_class=HelpFormatter,
        allow_abbrev=False,
    )
    parser.add_argument("input", type=Path, help="An executable or a directory of executables.")
    parser.add_argument("output", type=Path, help="Destination directory.")
    parser.add_argument(
        "--label",
        default=None,
        help="Class name recorded for every converted file.",
    )


def _add_dataset(subparsers: argparse._SubParsersAction[ArgumentParser]) -> None:
    parser = subparsers.add_parser(
        "dataset",
        help="Generate, index or split image datasets.",
        description="Dataset utilities.",
        formatter_class=HelpFormatter,
        allow_abbrev=False,
    )
    actions = parser.add_subparsers(
        help="The dataset action.",
        title="Actions",
        dest="action",
        required=True,
        parser_class=ArgumentParser,
    )
    defaults = SynthSpec()
    synth = actions.add_parser(
        "synth",
        help="Write a synthetic corpus in the MaleVis layout.",
        parents=[_common()],
        formatter_class=HelpFormatter,
        allow_abbrev=False,
    )
    synth.add_argument("output", type=Path, help="Destination directory.")
    synth.add_argument("--families", type=int, default=defaults.families, help="Malware families.")
    synth.add_argument(
        "--per-family",
        type=int,
        default=defaults.samples_per_family,
        help="Samples per family.",
    )
    synth.add_argument(
        "--benign",
        type=int,
        default=defaults.benign_samples,
        help="Benign samples.",
    )
    synth.add_argument(
        "--min-length",
        type=int,
        default=defaults.min_length,
        help="Shortest sample in bytes.",
    )
    synth.add_argument(
        "--max-length",
        type=int,
        default=defaults.max_length,
        help="Longest sample in bytes.",
    )
    synth.add_argument(
        "--noise",
        type=float,
        default=defaults.noise_fraction,
        help="Share of motif bytes replaced by noise.",
    )

    scan = actions.add_parser(
        "scan",
        help="Index a directory of <class>/<image>.png files.",
        parents=[_common()],
        formatter_class=HelpFormatter,
        allow_abbrev=False,
    )
    scan.add_argument("root", type=Path, help="Dataset root; one subdirectory per class.")
    scan.add_argument(
        "--output",
        type=Path,
        default=None,
        help="Manifest to write; <root>/manifest.jsonl when unset.",
    )
    scan.add_argument("--benign-name", default=BENIGN_NAME, help="Name of the benign class.")

    split = actions.add_parser(
        "split",
        help="Assign records to train and val, stratified by class.",
        parents=[_common()],
        formatter_class=HelpFormatter,
        allow_abbrev=False,
    )
    split.add_argument("manifest", type=Path, help="Manifest to split; rewritten in place.")
    split.add_argument(
        "--train-fraction",
        type=float,
        default=TRAIN_FRACTION,
        help="Share of every class assigned to train.",
    )
    split.add_argument(
        "--split-file",
        type=Path,
        default=None,
        help="Also export the assignment as {id, split} JSON lines.",
    )
    split.add_argument(
        "--from-file",
        type=Path,
        default=None,
        help="Apply an exported assignment instead of drawing a new one.",
    )


def _add_train(subparsers: argparse._SubParsersAction[ArgumentParser]) -> None:
    train = TrainConfig()
    parser = subparsers.add_parser(
        "train",
        help="Train the triage (stage1) or family (stage2) model.",
        description="Train one cascade stage on a split manifest.\n"
        "stage1 trains the binary DenseNet, stage2 the 25-family LeViT.",
        parents=[_common()],
        formatter_class=HelpFormatter,
        allow_abbrev=False,
    )
    parser.add_argument("stage", choices=("stage1", "stage2"), help="The stage to train.")
    parser.add_argument("--data", type=Path, required=True, help="Split manifest.")
    parser.add_argument("--out", type=Path, required=True, help="Output directory.")
    parser.add_argument(
        "--epochs",
        type=int,
        default=None,
        help=f"Sets train.max_epochs (default: {train.max_epochs}).",
    )
    parser.add_argument(
        "--lr",
        type=float,
        default=None,
        help=f"Sets train.lr0 (default: {train.lr0}).",
    )
    parser.add_argument(
        "--resume",
        type=Path,
        default=None,
        help="Continue from this checkpoint.",
    )
    parser.add_argument(
        "--init",
        type=Path,
        default=None,
        help="Start from this checkpoint with a freshly initialized head.",
    )
    parser.add_argument(
        "--freeze-backbone",
        action="store_true",
        default=False,
        help="With --init, train only the head.",
    )
    _config_option(parser)


def _add_cascade(subparsers: argparse._SubParsersAction[ArgumentParser]) -> None:
    parser = subparsers.add_parser(
        "cascade",
        help="Assemble a cascade directory from two stage checkpoints.",
        parents=[_common()],
        formatter_class=HelpFormatter,
        allow_abbrev=False,
    )
    parser.add_argument("output", type=Path, help="Cascade directory.")
    parser.add_argument("--stage1", type=Path, required=True, help="Triage checkpoint.")
    parser.add_argument("--stage2", type=Path, required=True, help="Family checkpoint.")
    parser.add_argument(
        "--data",
        type=Path,
        default=None,
        help="Manifest whose class table the cascade reports; MaleVis when unset.",
    )
    parser.add_argument(
        "--threshold",
        type=float,
        default=BENIGN_THRESHOLD,
        help="Malign probability at which the family model runs.",
    )


def _add_classify(subparsers: argparse._SubParsersAction[ArgumentParser]) -> None:
    parser = subparsers.add_parser(
        "classify",
        help="Classify executables or images, one JSON line per sample.",
        parents=[_common(default_workers())],
        formatter_class=HelpFormatter,
        allow_abbrev=False,
    )
    parser.add_argument("--cascade", type=Path, required=True, help="Cascade directory.")
    parser.add_argument(
        "--input",
        type=Path,
        required=True,
        help="A PNG, an executable, a directory of either, or a manifest.jsonl.",
    )
    parser.add_argument(
        "--output",
        type=Path,
        default=None,
        help="JSON-lines destination; stdout when unset.",
    )


def _add_bench(subparsers: argparse._SubParsersAction[ArgumentParser]) -> None:
    defaults = BenchConfig()
    parser = subparsers.add_parser(
        "bench",
        help="Measure cascade throughput in images per second.",
        description="Decode the images first, then time the cascade forward passes only.",
        parents=[_common(default_workers())],
        formatter_class=HelpFormatter,
        allow_abbrev=False,
    )
    parser.add_argument("--cascade", type=Path, required=True, help="Cascade directory.")
    parser.add_argument("--data", type=Path, required=True, help="Manifest of the images.")
    parser.add_argument(
        "--split",
        default=None,
        choices=("train", "val"),
        help="Restrict to one split.",
    )
    parser.add_argument(
        "--batch-size",
        type=int,
        default=None,
        help=f"Images per forward batch (default: {defaults.batch_size}).",
    )
    parser.add_argument(
        "--warmup",
        type=int,
        default=None,
        help=f"Untimed batches (default: {defaults.warmup}).",
    )
    parser.add_argument(
        "--reps",
        type=int,
        default=None,
        help=f"Timed repetitions (default: {defaults.reps}).",
    )
    parser.add_argument("--output", type=Path, default=None, help="JSON destination.")
    _config_option(parser)


def _add_eval(subparsers: argparse._SubParsersAction[ArgumentParser]) -> None:
    parser = subparsers.add_parser(
        "eval",
        help="Score a cascade on a labeled split and print a report.",
        parents=[_common(default_workers())],
        formatter_class=HelpFormatter,
        allow_abbrev=False,
    )
    parser.add_argument("--cascade", type=Path, required=True, help="Cascade directory.")
    parser.add_argument("--data", type=Path, required=True, help="Split manifest.")
    parser.add_argument(
        "--split",
        default="val",
        choices=("train", "val", "all"),
        help="The split to score.",
    )
    parser.add_argument(
        "--format",
        dest="fmt",
        default="markdown",
        choices=("markdown", "json"),
        help="Report format.",
    )
    parser.add_argument("--output", type=Path, default=None, help="Report destination.")
    parser.add_argument(
        "--bench",
        action="store_true",
        default=False,
        help="Also benchmark throughput on the same images.",
    )
    _config_option(parser)


def build_parser() -> ArgumentParser:
    """Build the full argument parser.

    Returns:
        The parser.
    """
    parser = ArgumentParser(
        prog="lmc",
        description="Malware classification from executable images.",
        formatter_class=argparse.RawTextHelpFormatter,
        allow_abbrev=False,
    )

    parser.add_argument(
        "--version",
        action="version",
        version=version_builder(),
        help="Print the included package versions and exit.",
    )

    subparsers = parser.add_subparsers(
        help="The subcommand to invoke.",
        title="Commands",
        dest="subcommand",
        required=True,
        parser_class=ArgumentParser,
    )
    _add_convert(subparsers)
    _add_dataset(subparsers)
    _add_train(subparsers)
    _add_cascade(subparsers)
    _add_classify(subparsers)
    _add_bench(subparsers)
    _add_eval(subparsers)
    return parser


def parse(argv: Sequence[str] | None = None) -> argparse.Namespace:
    """Parse the command line arguments.

    Tokens of the form `--key=value` that no flag claims are kept in
    `overrides` for the subcommands that read config sections.

    Args:
        argv: Arguments without the program name; `sys.argv[1:]` when None.

    Returns:
        The parsed arguments.
    """
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if extra and args.subcommand not in OVERRIDABLE:
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    if args.subcommand in OVERRIDABLE:
        args.overrides = extra
    return args
