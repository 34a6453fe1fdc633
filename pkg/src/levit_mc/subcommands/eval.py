"""Evaluate a cascade on a labeled split."""

from __future__ import annotations

from typing import TYPE_CHECKING

from levit_mc.cascade import load_cascade
from levit_mc.config import build_config, load_file, parse_overrides
from levit_mc.data import ImageLoader, read_manifest
from levit_mc.evaluation import bench_throughput, emit_report, evaluate
from levit_mc.utils import Colors, echo, write_output


if TYPE_CHECKING:
    from pathlib import Path

    from levit_mc.evaluation import BenchConfig, ReportFormat


class Eval:
    """Score the cascade and render a report."""

    def __init__(  # noqa: PLR0913
        self,
        cascade: Path,
        data: Path,
        split: str = "val",
        fmt: ReportFormat = "markdown",
        output: Path | None = None,
        bench: bool = False,  # noqa: FBT001, FBT002
        config: Path | None = None,
        overrides: list[str] | None = None,
        seed: int | None = None,  # noqa: ARG002
        workers: int = 1,
    ) -> None:
        """Initialize the evaluation.

        Args:
            cascade: Cascade directory.
            data: Split manifest.
            split: "train", "val" or "all".
            fmt: Report format.
            output: Report destination; stdout when None.
            bench: Also benchmark throughput on the same images.
            config: YAML config file.
            overrides: `--key=value` tokens.
            seed: Unused; evaluation is deterministic.
            workers: Image decoder and benchmark threads.
        """
        self.cascade = cascade
        self.data = data
        self.split = None if split == "all" else split
        self.fmt = fmt
        self.output = output
        self.bench = bench
        parsed = parse_overrides(overrides or [], ["bench"])
        self.bench_config: BenchConfig = build_config(
            "bench",
            load_file(config),
            parsed,
            workers=workers,
        )

    def run(self) -> None:
        """Evaluate, optionally benchmark, and write the report."""
        cascade = load_cascade(self.cascade)
        manifest = read_manifest(self.data)
        settings = self.bench_config
        loader = ImageLoader(manifest, cascade.image_size, workers=settings.workers)
        report = evaluate(
            cascade,
            manifest,
            self.split,
            batch_size=settings.batch_size,
            loader=loader,
        )
        if self.bench:
            images = loader.load(manifest.subset(self.split))
            report.throughput = bench_throughput(
                cascade,
                images,
                settings.batch_size,
                settings.warmup,
                settings.reps,
                settings.workers,
            )
        write_output(emit_report([report], self.fmt), self.output)
        echo(f"accuracy {report.accuracy:.4f} over {report.total} samples", Colors.GREEN)
