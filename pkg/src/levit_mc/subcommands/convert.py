"""Render executables as PNG images with a manifest."""

from __future__ import annotations

import logging

from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import TYPE_CHECKING

from levit_mc.bin2img import render_file
from levit_mc.data import MANIFEST_NAME, ClassIndex, DatasetManifest, write_manifest
from levit_mc.errors import IoError, UsageError
from levit_mc.utils import Colors, echo


if TYPE_CHECKING:
    from pathlib import Path

    from levit_mc.bin2img import ManifestRecord


LOGGER = logging.getLogger(__name__)


class Convert:
    """Convert a file or a directory tree of executables."""

    def __init__(
        self,
        input: Path,  # noqa: A002
        output: Path,
        label: str | None = None,
        seed: int | None = None,  # noqa: ARG002
        workers: int = 1,
    ) -> None:
        """Initialize the conversion.

        Args:
            input: An executable or a directory.
            output: Destination directory; mirrors the input tree.
            label: Class name recorded for every file.
            seed: Unused; conversion is deterministic.
            workers: Rendering threads.
        """
        self.input = input
        self.output = output
        self.label = label
        self.workers = max(1, workers)

    def _sources(self) -> tuple[Path, list[Path]]:
        if self.input.is_file():
            return self.input.parent, [self.input]
        if self.input.is_dir():
            output = self.output.resolve()
            files = [
                path
                for path in sorted(self.input.rglob("*"))
                if path.is_file() and output not in path.resolve().parents
            ]
            return self.input, files
        err = f"no such file or directory: {self.input}"
        raise IoError(err)

    def _render(self, base: Path, path: Path, label: int | None) -> ManifestRecord | None:
        relative = path.relative_to(base)
        if path.stat().st_size == 0:
            LOGGER.warning("skipping empty file %s", path)
            return None
        record = render_file(path, self.output / relative.parent, label=label, base=self.output)
        return replace(record, id=(relative.parent / relative.stem).as_posix())

    def run(self) -> None:
        """Render every input file and write `manifest.jsonl`.

        Raises:
            UsageError: If the label is not a MaleVis class name.
        """
        class_index = ClassIndex.malevis()
        label = None
        if self.label is not None:
            if self.label not in class_index.names:
                names = ", ".join(class_index.names)
                err = f"unknown class {self.label!r}, expected one of {names}"
                raise UsageError(err)
            label = class_index.names.index(self.label)
        base, files = self._sources()
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            rendered = list(pool.map(lambda path: self._render(base, path, label), files))
        records = tuple(record for record in rendered if record is not None)
        manifest = DatasetManifest(records, class_index, self.output)
        write_manifest(manifest, self.output / MANIFEST_NAME)
        echo(f"Converted {len(records)} files into {self.output}", Colors.GREEN)
