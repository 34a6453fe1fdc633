"""Dataset utilities: synthetic corpora, directory scans and splits."""

from __future__ import annotations

from dataclasses import replace
from typing import TYPE_CHECKING, Any

from levit_mc.config import resolve_seed
from levit_mc.data import (
    MANIFEST_NAME,
    SPLITS,
    SynthSpec,
    apply_split_file,
    read_manifest,
    scan_dir,
    split,
    synth_generate,
    write_manifest,
    write_split_file,
)
from levit_mc.utils import Colors, echo


if TYPE_CHECKING:
    from pathlib import Path


class Dataset:
    """Run one dataset action."""

    def __init__(
        self,
        action: str,
        seed: int | None = None,
        workers: int = 1,
        **options: Any,  # noqa: ANN401
    ) -> None:
        """Initialize the action.

        Args:
            action: "synth", "scan" or "split".
            seed: Seed of the action; falls back to `LMCK_SEED`.
            workers: Unused; dataset actions run on one thread.
            options: The action's own arguments.
        """
        self.action = action
        self.seed = seed
        self.workers = workers
        self.options = options

    def run(self) -> None:
        """Dispatch to the action."""
        getattr(self, f"_{self.action}")()

    def _synth(self) -> None:
        spec = SynthSpec(
            families=self.options["families"],
            samples_per_family=self.options["per_family"],
            benign_samples=self.options["benign"],
            seed=resolve_seed(self.seed, SynthSpec.seed),
            min_length=self.options["min_length"],
            max_length=self.options["max_length"],
            noise_fraction=self.options["noise"],
        )
        output: Path = self.options["output"]
        manifest = synth_generate(spec, output)
        echo(
            f"Wrote {len(manifest)} samples in {len(manifest.class_index)} classes to {output}",
            Colors.GREEN,
        )

    def _scan(self) -> None:
        root: Path = self.options["root"]
        target: Path = self.options["output"] or root / MANIFEST_NAME
        manifest = scan_dir(root, self.options["benign_name"])
        if target.parent.resolve() != root.resolve():
            # absolute paths for a manifest outside the dataset root
            records = (
                replace(record, path=manifest.resolve(record).resolve().as_posix())
                for record in manifest.records
            )
            manifest = manifest.relabel(records, manifest.class_index)
        write_manifest(manifest, target)
        echo(f"Indexed {len(manifest)} images into {target}", Colors.GREEN)

    def _split(self) -> None:
        path: Path = self.options["manifest"]
        manifest = read_manifest(path)
        source: Path | None = self.options["from_file"]
        if source is not None:
            tagged = apply_split_file(manifest, source)
        else:
            tagged = split(manifest, self.options["train_fraction"], resolve_seed(self.seed))
        write_manifest(tagged, path)
        target: Path | None = self.options["split_file"]
        if target is not None:
            write_split_file(tagged, target)
        counts = ", ".join(f"{name} {len(tagged.subset(name))}" for name in SPLITS)
        echo(f"Split {path}: {counts}", Colors.GREEN)
