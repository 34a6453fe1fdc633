"""Assemble a cascade directory."""

from __future__ import annotations

from typing import TYPE_CHECKING

from levit_mc.bin2img import IMAGE_SIZE
from levit_mc.cascade import BENIGN_THRESHOLD, load_cascade, save_cascade
from levit_mc.checkpoint import load_checkpoint
from levit_mc.data import ClassIndex, read_manifest
from levit_mc.utils import Colors, echo


if TYPE_CHECKING:
    from pathlib import Path


class Cascade:
    """Combine a triage and a family checkpoint."""

    def __init__(  # noqa: PLR0913
        self,
        output: Path,
        stage1: Path,
        stage2: Path,
        data: Path | None = None,
        threshold: float = BENIGN_THRESHOLD,
        seed: int | None = None,  # noqa: ARG002
        workers: int = 1,  # noqa: ARG002
    ) -> None:
        """Initialize the assembly.

        Args:
            output: Cascade directory.
            stage1: Triage checkpoint.
            stage2: Family checkpoint.
            data: Manifest providing the class table; MaleVis when unset.
            threshold: Malign probability at which the family model runs.
            seed: Unused.
            workers: Unused.
        """
        self.output = output
        self.stage1 = stage1
        self.stage2 = stage2
        self.data = data
        self.threshold = threshold

    def run(self) -> None:
        """Write the directory and check that it loads."""
        class_index = read_manifest(self.data).class_index if self.data else ClassIndex.malevis()
        image_size = int(load_checkpoint(self.stage2).config.get("image_size", IMAGE_SIZE))
        save_cascade(
            self.output,
            self.stage1,
            self.stage2,
            class_index=class_index,
            benign_threshold=self.threshold,
            image_size=image_size,
        )
        cascade = load_cascade(self.output)
        echo(
            f"Cascade {self.output}: threshold {cascade.benign_threshold}, "
            f"{len(cascade.class_index.families)} families, {image_size}px",
            Colors.GREEN,
        )
