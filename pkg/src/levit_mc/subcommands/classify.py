"""Classify executables or their images."""

from __future__ import annotations

import logging

from collections import Counter
from typing import TYPE_CHECKING

from levit_mc.bin2img import PNG_SIGNATURE, bytes_to_grid, decode_png, grid_to_tensor, load_bytes
from levit_mc.cascade import load_cascade
from levit_mc.data import ImageLoader, read_manifest
from levit_mc.errors import EmptyDataset, IoError
from levit_mc.utils import Colors, echo, write_output


if TYPE_CHECKING:
    from pathlib import Path

    import numpy as np

    from numpy.typing import NDArray


LOGGER = logging.getLogger(__name__)


class Classify:
    """Emit one JSON verdict per input sample."""

    def __init__(
        self,
        cascade: Path,
        input: Path,  # noqa: A002
        output: Path | None = None,
        seed: int | None = None,  # noqa: ARG002
        workers: int = 1,
    ) -> None:
        """Initialize the classification.

        Args:
            cascade: Cascade directory.
            input: A PNG, an executable, a directory of either, or a manifest.
            output: JSON-lines destination; stdout when None.
            seed: Unused; inference is deterministic.
            workers: Classification threads.
        """
        self.cascade = cascade
        self.input = input
        self.output = output
        self.workers = max(1, workers)

    def _from_manifest(self, size: int) -> tuple[list[str], list[NDArray[np.float32]]]:
        manifest = read_manifest(self.input)
        loader = ImageLoader(manifest, size, cache=False, workers=self.workers)
        images = loader.load(manifest.records)
        return [record.id for record in manifest.records], list(images)

    def _from_files(self, size: int) -> tuple[list[str], list[NDArray[np.float32]]]:
        if self.input.is_file():
            base, files = self.input.parent, [self.input]
        elif self.input.is_dir():
            base = self.input
            files = [path for path in sorted(self.input.rglob("*")) if path.is_file()]
        else:
            err = f"no such file or directory: {self.input}"
            raise IoError(err)
        ids, images = [], []
        for path in files:
            data = load_bytes(path)
            grid = decode_png(data) if data.startswith(PNG_SIGNATURE) else bytes_to_grid(data)
            ids.append(path.relative_to(base).as_posix())
            images.append(grid_to_tensor(grid, size).data)
        return ids, images

    def run(self) -> None:
        """Classify every sample and write the verdicts in input order.

        Raises:
            EmptyDataset: If the input holds no samples.
        """
        cascade = load_cascade(self.cascade)
        if self.input.suffix == ".jsonl":
            ids, images = self._from_manifest(cascade.image_size)
        else:
            ids, images = self._from_files(cascade.image_size)
        if not images:
            err = f"nothing to classify in {self.input}"
            raise EmptyDataset(err)
        verdicts = cascade.classify_batch(images, self.workers)
        lines = [
            f"{verdict.to_json(sample_id, cascade.class_index)}\n"
            for sample_id, verdict in zip(ids, verdicts, strict=True)
        ]
        write_output("".join(lines), self.output)
        kinds = Counter(verdict.kind.value for verdict in verdicts)
        echo(
            f"Classified {len(verdicts)} samples: "
            f"{kinds['benign']} benign, {kinds['malign']} malign",
            Colors.GREEN,
        )
