"""Benchmark cascade throughput."""

from __future__ import annotations

import json

from typing import TYPE_CHECKING

from levit_mc.cascade import load_cascade
from levit_mc.config import build_config, load_file, parse_overrides
from levit_mc.data import ImageLoader, read_manifest
from levit_mc.evaluation import bench_throughput, references
from levit_mc.utils import Colors, echo, write_output


if TYPE_CHECKING:
    from pathlib import Path

    from levit_mc.evaluation import BenchConfig


class Bench:
    """Time the cascade on decoded images of a manifest."""

    def __init__(  # noqa: PLR0913
        self,
        cascade: Path,
        data: Path,
        split: str | None = None,
        batch_size: int | None = None,
        warmup: int | None = None,
        reps: int | None = None,
        output: Path | None = None,
        config: Path | None = None,
        overrides: list[str] | None = None,
        seed: int | None = None,  # noqa: ARG002
        workers: int = 1,
    ) -> None:
        """Initialize the benchmark.

        Args:
            cascade: Cascade directory.
            data: Manifest of the images.
            split: Restrict to one split.
            batch_size: Images per forward batch.
            warmup: Untimed batches.
            reps: Timed repetitions.
            output: JSON destination; stdout when None.
            config: YAML config file.
            overrides: `--key=value` tokens.
            seed: Unused; timing is the only varying output.
            workers: Threads dispatching batches and decoding images.
        """
        self.cascade = cascade
        self.data = data
        self.split = split
        self.output = output
        parsed = parse_overrides(overrides or [], ["bench"])
        self.bench_config: BenchConfig = build_config(
            "bench",
            load_file(config),
            parsed,
            batch_size=batch_size,
            warmup=warmup,
            reps=reps,
            workers=workers,
        )

    def run(self) -> None:
        """Decode, then time, then write the report as JSON."""
        cascade = load_cascade(self.cascade)
        manifest = read_manifest(self.data)
        loader = ImageLoader(manifest, cascade.image_size, workers=self.bench_config.workers)
        images = loader.load(manifest.subset(self.split))
        settings = self.bench_config
        report = bench_throughput(
            cascade,
            images,
            settings.batch_size,
            settings.warmup,
            settings.reps,
            settings.workers,
        )
        document = {"throughput": report.to_dict(), "references": references()}
        write_output(json.dumps(document, indent=2, sort_keys=True) + "\n", self.output)
        echo(
            f"{report.images_per_second:.1f} ± {report.images_per_second_std:.1f} images/s, "
            f"stage-2 skip rate {report.stage2_skip_rate:.3f}",
            Colors.GREEN,
        )
