"""Dataset manifests, MaleVis-layout scanning, stratified splits and batching."""

from __future__ import annotations

import functools
import itertools
import json
import logging
import math
import threading

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources as importlib_resources
from pathlib import Path
from typing import TYPE_CHECKING, Any, NamedTuple

import numpy as np
import yaml

from PIL import Image, UnidentifiedImageError

from levit_mc.bin2img import (
    IMAGE_SIZE,
    ManifestRecord,
    bytes_to_grid,
    grid_to_tensor,
    read_png,
    write_png,
)
from levit_mc.errors import (
    ConfigError,
    DecodeError,
    EmptyDataset,
    InvalidInput,
    IoError,
    StratifyError,
)


if TYPE_CHECKING:
    from collections.abc import Iterable, Iterator, Sequence

    from numpy.typing import NDArray


LOGGER = logging.getLogger(__name__)

MALEVIS_CLASSES = 26
FAMILY_CLASSES = 25
BENIGN_NAME = "Other"
MANIFEST_NAME = "manifest.jsonl"
CLASSES_NAME = "classes.yaml"
SPLITS = ("train", "val")
TRAIN_FRACTION = 0.7
BATCH_SIZE = 32
# floor(0.7 * n) must not lose a sample to float rounding (0.7 * 10 = 6.999...)
_FLOOR_SLACK = 1e-9


@functools.cache
def reference_data() -> dict[str, Any]:
    """Load the packaged MaleVis layout and published reference numbers.

    Returns:
        The parsed `malevis.yaml`.
    """
    text = (importlib_resources.files("levit_mc.resources.data") / "malevis.yaml").read_text()
    data: dict[str, Any] = yaml.safe_load(text)
    return data


@dataclass(frozen=True)
class ClassIndex:
    """Ordered class names; the label of a class is its position.

    Attributes:
        names: Class names in label order.
        benign_index: Label of the benign class, None for family-only indices.
    """

    names: tuple[str, ...]
    benign_index: int | None = None

    def __post_init__(self) -> None:
        """Validate the table.

        Raises:
            ConfigError: If names repeat or the benign label is out of range.
        """
        object.__setattr__(self, "names", tuple(self.names))
        if len(set(self.names)) != len(self.names):
            err = f"class names must be unique: {self.names}"
            raise ConfigError(err)
        if self.benign_index is not None and not 0 <= self.benign_index < len(self.names):
            err = f"benign index {self.benign_index} outside [0, {len(self.names)})"
            raise ConfigError(err)

    @classmethod
    def from_names(cls, names: Iterable[str], benign_name: str = BENIGN_NAME) -> ClassIndex:
        """Build an index from names in label order.

        Args:
            names: Class names.
            benign_name: Name of the benign class, if present.

        Returns:
            The index.
        """
        ordered = tuple(names)
        return cls(ordered, ordered.index(benign_name) if benign_name in ordered else None)

    @classmethod
    def malevis(cls) -> ClassIndex:
        """The 26-class MaleVis table, labels in lexicographic order.

        Returns:
            The index.
        """
        dataset = reference_data()["dataset"]
        return cls.from_names(sorted(dataset["classes"]), dataset["benign"])

    def __len__(self) -> int:
        """Number of classes.

        Returns:
            The class count.
        """
        return len(self.names)

    @property
    def families(self) -> tuple[str, ...]:
        """Malign class names in family-index order."""
        return tuple(name for label, name in enumerate(self.names) if label != self.benign_index)

    def is_benign(self, label: int) -> bool:
        """Whether a label is the benign class.

        Args:
            label: A class label.

        Returns:
            True for the benign label.
        """
        return label == self.benign_index

    def label_to_family(self, label: int) -> int | None:
        """Family index of a class label.

        Args:
            label: A class label.

        Returns:
            The family index, None for the benign label.
        """
        if self.is_benign(label):
            return None
        if self.benign_index is not None and label > self.benign_index:
            return label - 1
        return label

    def family_to_label(self, family: int) -> int:
        """Class label of a family index.

        Args:
            family: A family index.

        Returns:
            The class label.

        Raises:
            InvalidInput: If the family index is out of range.
        """
        if not 0 <= family < len(self.families):
            err = f"family {family} outside [0, {len(self.families)})"
            raise InvalidInput(err)
        if self.benign_index is not None and family >= self.benign_index:
            return family + 1
        return family

    def padded(self, size: int = MALEVIS_CLASSES) -> ClassIndex:
        """Append placeholder names so that the table has `size` entries.

        Existing labels keep their positions.

        Args:
            size: Target class count.

        Returns:
            The padded index.
        """
        extra = (f"unused-{i:02d}" for i in itertools.count(len(self.names)))
        names = self.names + tuple(itertools.islice(extra, max(0, size - len(self.names))))
        return ClassIndex(names, self.benign_index)

    def to_dict(self) -> dict[str, Any]:
        """Plain data for YAML files.

        Returns:
            The names and benign name.
        """
        benign = None if self.benign_index is None else self.names[self.benign_index]
        return {"classes": list(self.names), "benign": benign}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ClassIndex:
        """Inverse of `to_dict`.

        Args:
            data: The names and benign name.

        Returns:
            The index.
        """
        names = tuple(str(name) for name in data["classes"])
        benign = data.get("benign")
        return cls(names, None if benign is None else names.index(benign))


@dataclass(frozen=True)
class DatasetManifest:
    """Samples of a dataset.

    Attributes:
        records: One record per sample.
        class_index: Label table.
        root: Directory that relative record paths are resolved against.
        inline: Raw bytes of samples kept in memory, keyed by record id.
    """

    records: tuple[ManifestRecord, ...]
    class_index: ClassIndex
    root: Path = field(default_factory=Path)
    inline: dict[str, bytes] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        """Validate labels and split tags.

        Raises:
            InvalidInput: If a label or split tag is invalid or an id repeats.
        """
        object.__setattr__(self, "records", tuple(self.records))
        classes = len(self.class_index)
        ids = set()
        for record in self.records:
            if record.label is not None and not 0 <= record.label < classes:
                err = f"record {record.id}: label {record.label} outside [0, {classes})"
                raise InvalidInput(err)
            if record.split is not None and record.split not in SPLITS:
                err = f"record {record.id}: split {record.split!r} not in {SPLITS}"
                raise InvalidInput(err)
            if record.id in ids:
                err = f"duplicate record id {record.id}"
                raise InvalidInput(err)
            ids.add(record.id)

    def __len__(self) -> int:
        """Number of records.

        Returns:
            The record count.
        """
        return len(self.records)

    def subset(self, split: str | None) -> list[ManifestRecord]:
        """Records of one split, in manifest order.

        Args:
            split: "train", "val", or None for every record.

        Returns:
            The records.
        """
        return [record for record in self.records if split is None or record.split == split]

    def class_counts(self, split: str | None = None) -> list[int]:
        """Samples per label.

        Args:
            split: Restrict to one split.

        Returns:
            One count per class.
        """
        counts = [0] * len(self.class_index)
        for record in self.subset(split):
            if record.label is not None:
                counts[record.label] += 1
        return counts

    def resolve(self, record: ManifestRecord) -> Path:
        """Location of a record's PNG.

        Args:
            record: A record of this manifest.

        Returns:
            The absolute or root-relative path.
        """
        path = Path(record.path)
        return path if path.is_absolute() else self.root / path

    def relabel(
        self,
        records: Iterable[ManifestRecord],
        class_index: ClassIndex,
    ) -> DatasetManifest:
        """Derive a manifest over the same files with a new label table.

        Args:
            records: The new records.
            class_index: The new table.

        Returns:
            The derived manifest.
        """
        kept = tuple(records)
        ids = {record.id for record in kept}
        inline = {key: value for key, value in self.inline.items() if key in ids}
        return DatasetManifest(kept, class_index, self.root, inline)


def read_manifest(path: Path) -> DatasetManifest:
    """Read a JSON-lines manifest and its `classes.yaml` sidecar.

    Without a sidecar the MaleVis table is assumed.

    Args:
        path: The manifest file.

    Returns:
        The manifest; relative paths resolve against its directory.

    Raises:
        IoError: If the file cannot be read.
    """
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        err = f"cannot read manifest {path}: {exc.strerror or exc}"
        raise IoError(err) from exc
    sidecar = path.parent / CLASSES_NAME
    if sidecar.is_file():
        class_index = ClassIndex.from_dict(yaml.safe_load(sidecar.read_text(encoding="utf-8")))
    else:
        class_index = ClassIndex.malevis()
    records = [ManifestRecord.from_json(line) for line in lines if line.strip()]
    return DatasetManifest(tuple(records), class_index, path.parent)


def write_manifest(manifest: DatasetManifest, path: Path) -> None:
    """Write a manifest as JSON lines plus a `classes.yaml` sidecar.

    Args:
        manifest: The manifest.
        path: Destination file.

    Raises:
        IoError: If the files cannot be written.
    """
    if manifest.inline:
        LOGGER.warning("%d inline samples are not written to %s", len(manifest.inline), path)
    text = "".join(f"{record.to_json()}\n" for record in manifest.records)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        (path.parent / CLASSES_NAME).write_text(
            yaml.safe_dump(manifest.class_index.to_dict(), sort_keys=False),
            encoding="utf-8",
        )
    except OSError as exc:
        err = f"cannot write manifest {path}: {exc.strerror or exc}"
        raise IoError(err) from exc


def write_split_file(manifest: DatasetManifest, path: Path) -> None:
    """Export the split assignment as JSON lines `{"id", "split"}`.

    Args:
        manifest: A split manifest.
        path: Destination file.

    Raises:
        IoError: If the file cannot be written.
    """
    lines = (json.dumps({"id": record.id, "split": record.split}) for record in manifest.records)
    try:
        path.write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")
    except OSError as exc:
        err = f"cannot write split file {path}: {exc.strerror or exc}"
        raise IoError(err) from exc


def apply_split_file(manifest: DatasetManifest, path: Path) -> DatasetManifest:
    """Import a split assignment.

    Args:
        manifest: The manifest to tag.
        path: A file written by `write_split_file`.

    Returns:
        The tagged manifest.

    Raises:
        IoError: If the file cannot be read.
        InvalidInput: If a record has no assignment.
    """
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        err = f"cannot read split file {path}: {exc.strerror or exc}"
        raise IoError(err) from exc
    assignment = {}
    for line in filter(str.strip, lines):
        entry = json.loads(line)
        assignment[str(entry["id"])] = entry["split"]
    missing = [record.id for record in manifest.records if record.id not in assignment]
    if missing:
        err = f"{len(missing)} records have no split assignment, e.g. {missing[0]}"
        raise InvalidInput(err)
    records = (replace(record, split=assignment[record.id]) for record in manifest.records)
    return manifest.relabel(records, manifest.class_index)


def _png_extent(path: Path) -> tuple[int, int]:
    try:
        with Image.open(path) as image:
            kind, (width, height) = image.format, image.size
    except (UnidentifiedImageError, SyntaxError, ValueError) as exc:
        err = f"{path} is not a readable PNG: {exc}"
        raise DecodeError(err) from exc
    if kind != "PNG":
        err = f"{path} is a {kind} image, not a PNG"
        raise DecodeError(err)
    return height, width


def scan_dir(root: Path, benign_name: str = BENIGN_NAME) -> DatasetManifest:
    """Index a `root/<class_name>/*.png` tree.

    Labels follow the lexicographic order of the class directory names. External
    PNGs carry no padding count, so `pad_bytes` is 0 and `orig_len` is the full
    pixel byte count.

    Args:
        root: The dataset directory.
        benign_name: Directory name of the benign class.

    Returns:
        The manifest, paths relative to `root`.

    Raises:
        IoError: If the directory cannot be read.
        DecodeError: If a `.png` file is not a readable PNG image.
        EmptyDataset: If no PNG images are found.
    """
    try:
        class_dirs = sorted(
            (entry for entry in root.iterdir() if entry.is_dir()),
            key=lambda p: p.name,
        )
        records = []
        for label, class_dir in enumerate(class_dirs):
            for png in sorted(class_dir.glob("*.png")):
                height, width = _png_extent(png)
                records.append(
                    ManifestRecord(
                        id=f"{class_dir.name}/{png.stem}",
                        path=png.relative_to(root).as_posix(),
                        label=label,
                        pad_bytes=0,
                        orig_len=height * width * 3,
                    ),
                )
    except OSError as exc:
        err = f"cannot scan {root}: {exc.strerror or exc}"
        raise IoError(err) from exc
    if not records:
        err = f"no PNG images found under {root}"
        raise EmptyDataset(err)
    if len(class_dirs) != MALEVIS_CLASSES:
        LOGGER.warning(
            "found %d classes under %s, expected %d",
            len(class_dirs),
            root,
            MALEVIS_CLASSES,
        )
    class_index = ClassIndex.from_names((d.name for d in class_dirs), benign_name)
    LOGGER.info("scanned %d images in %d classes from %s", len(records), len(class_dirs), root)
    return DatasetManifest(tuple(records), class_index, root)


def split(
    manifest: DatasetManifest,
    train_fraction: float = TRAIN_FRACTION,
    seed: int = 0,
) -> DatasetManifest:
    """Stratified train/validation split.

    Per class, `floor(train_fraction * n)` randomly chosen records go to train and
    the rest to val. One generator seeded with `seed` shuffles the classes in label
    order.

    Args:
        manifest: A labeled manifest.
        train_fraction: Share of each class used for training.
        seed: Seeds the shuffle.

    Returns:
        The manifest with every record tagged.

    Raises:
        InvalidInput: If the fraction is outside (0, 1) or a record is unlabeled.
        StratifyError: If a class has fewer than two samples.
    """
    if not 0.0 < train_fraction < 1.0:
        err = f"train fraction must lie in (0, 1), got {train_fraction}"
        raise InvalidInput(err)
    by_label: dict[int, list[int]] = {}
    for position, record in enumerate(manifest.records):
        if record.label is None:
            err = f"cannot stratify unlabeled record {record.id}"
            raise InvalidInput(err)
        by_label.setdefault(record.label, []).append(position)
    rng = np.random.default_rng(seed)
    tags: dict[int, str] = {}
    for label in sorted(by_label):
        positions = by_label[label]
        if len(positions) < 2:  # noqa: PLR2004
            name = manifest.class_index.names[label]
            err = f"class {name!r} has {len(positions)} sample(s), need at least 2"
            raise StratifyError(err)
        order = rng.permutation(len(positions))
        cut = math.floor(train_fraction * len(positions) + _FLOOR_SLACK)
        for rank, index in enumerate(order):
            tags[positions[index]] = "train" if rank < cut else "val"
    records = (replace(record, split=tags[i]) for i, record in enumerate(manifest.records))
    return manifest.relabel(records, manifest.class_index)


def binary_view(manifest: DatasetManifest) -> DatasetManifest:
    """Relabel a manifest as benign (0) versus malign (1) for the triage stage.

    Args:
        manifest: A labeled manifest with a benign class.

    Returns:
        The two-class manifest.

    Raises:
        ConfigError: If the manifest has no benign class.
    """
    index = manifest.class_index
    if index.benign_index is None:
        err = "the triage view needs a benign class"
        raise ConfigError(err)
    records = (
        replace(record, label=0 if index.is_benign(record.label) else 1)
        for record in manifest.records
        if record.label is not None
    )
    return manifest.relabel(records, ClassIndex(("benign", "malign"), benign_index=0))


def family_view(manifest: DatasetManifest) -> DatasetManifest:
    """Keep malign records only, labeled by family index.

    Args:
        manifest: A labeled manifest.

    Returns:
        The family manifest.
    """
    index = manifest.class_index
    records = (
        replace(record, label=index.label_to_family(record.label))
        for record in manifest.records
        if record.label is not None and not index.is_benign(record.label)
    )
    return manifest.relabel(records, ClassIndex(index.families))


class ImageLoader:
    """Decode manifest records into image arrays, with caching and prefetch.

    Attributes:
        manifest: The dataset.
        image_size: Side of the produced images.
        workers: Decoder threads; 1 decodes on the calling thread.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        image_size: int = IMAGE_SIZE,
        *,
        cache: bool = True,
        workers: int = 1,
    ) -> None:
        """Initialize the loader.

        Args:
            manifest: The dataset.
            image_size: Side of the produced images.
            cache: Keep decoded images in memory.
            workers: Decoder threads.
        """
        self.manifest = manifest
        self.image_size = image_size
        self.workers = max(1, workers)
        self._cache: dict[str, NDArray[np.float32]] | None = {} if cache else None
        self._lock = threading.Lock()

    def image(self, record: ManifestRecord) -> NDArray[np.float32]:
        """Decode one record.

        Args:
            record: A record of the manifest.

        Returns:
            A (3, S, S) float32 array in [0, 1].
        """
        if self._cache is not None:
            with self._lock:
                hit = self._cache.get(record.id)
            if hit is not None:
                return hit
        raw = self.manifest.inline.get(record.id)
        if raw is not None:
            grid = bytes_to_grid(raw)
        else:
            grid = read_png(self.manifest.resolve(record), record.pad_bytes)
        array = grid_to_tensor(grid, self.image_size).data
        if self._cache is not None:
            with self._lock:
                self._cache[record.id] = array
        return array

    def load(self, records: Sequence[ManifestRecord]) -> NDArray[np.float32]:
        """Decode records into a batch, in order.

        Args:
            records: The records.

        Returns:
            A (N, 3, S, S) array.
        """
        if self.workers == 1 or len(records) < 2:  # noqa: PLR2004
            arrays = [self.image(record) for record in records]
        else:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                arrays = list(pool.map(self.image, records))
        if not arrays:
            return np.zeros((0, 3, self.image_size, self.image_size), np.float32)
        return np.stack(arrays)

    def batches(self, chunks: Iterable[Sequence[ManifestRecord]]) -> Iterator[NDArray[np.float32]]:
        """Decode a sequence of batches, one batch ahead when workers > 1.

        Args:
            chunks: Record batches in emission order.

        Yields:
            The decoded batches, in the same order.
        """
        if self.workers == 1:
            for chunk in chunks:
                yield self.load(chunk)
            return
        with ThreadPoolExecutor(max_workers=1) as ahead:
            pending = None
            for chunk in chunks:
                future = ahead.submit(self.load, chunk)
                if pending is not None:
                    yield pending.result()
                pending = future
            if pending is not None:
                yield pending.result()


class Batch(NamedTuple):
    """Images and labels of one batch."""

    images: NDArray[np.float32]
    labels: NDArray[np.int64]


def epoch_order(
    manifest: DatasetManifest,
    split_name: str | None,
    shuffle_seed: int = 0,
    epoch: int = 0,
) -> list[ManifestRecord]:
    """The record order of one epoch.

    Args:
        manifest: The dataset.
        split_name: The split to iterate, None for every record.
        shuffle_seed: Seeds the shuffle together with `epoch`.
        epoch: Epoch number.

    Returns:
        Every record of the split exactly once.

    Raises:
        EmptyDataset: If the split is empty.
    """
    records = manifest.subset(split_name)
    if not records:
        err = f"split {split_name!r} has no records"
        raise EmptyDataset(err)
    order = np.random.default_rng([shuffle_seed, epoch]).permutation(len(records))
    return [records[i] for i in order]


def iterate_batches(  # noqa: PLR0913
    manifest: DatasetManifest,
    split_name: str | None,
    batch_size: int = BATCH_SIZE,
    shuffle_seed: int = 0,
    epoch: int = 0,
    *,
    loader: ImageLoader | None = None,
) -> Iterator[Batch]:
    """Shuffled batches of one epoch; the last batch may be short.

    Args:
        manifest: The dataset.
        split_name: The split to iterate.
        batch_size: Records per batch.
        shuffle_seed: Seeds the shuffle together with `epoch`.
        epoch: Epoch number.
        loader: Decoder to use; a fresh 224-pixel loader by default.

    Yields:
        Batches in the deterministic epoch order.

    Raises:
        InvalidInput: If the batch size is not positive or a record is unlabeled.
    """
    if batch_size < 1:
        err = f"batch size must be positive, got {batch_size}"
        raise InvalidInput(err)
    order = epoch_order(manifest, split_name, shuffle_seed, epoch)
    if any(record.label is None for record in order):
        err = "cannot batch unlabeled records"
        raise InvalidInput(err)
    chunks = [order[start : start + batch_size] for start in range(0, len(order), batch_size)]
    decoder = loader or ImageLoader(manifest)
    for chunk, images in zip(chunks, decoder.batches(chunks), strict=True):
        yield Batch(images, np.array([record.label for record in chunk], dtype=np.int64))


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic corpus layout.

    Attributes:
        families: Malware families, at most 25.
        samples_per_family: Samples per family.
        benign_samples: Benign samples.
        seed: Seeds every byte.
        byte_motif_length: Motif length in bytes, rounded up to whole pixels.
        min_length: Shortest sample in bytes.
        max_length: Longest sample in bytes.
        noise_fraction: Share of motif bytes replaced by uniform noise.
    """

    families: int = 4
    samples_per_family: int = 16
    benign_samples: int = 16
    seed: int = 7
    byte_motif_length: int = 48
    min_length: int = 3 * 1024
    max_length: int = 64 * 1024
    noise_fraction: float = 0.1

    def __post_init__(self) -> None:
        """Validate the layout.

        Raises:
            ConfigError: If a count is out of range.
        """
        if not 1 <= self.families <= FAMILY_CLASSES:
            err = f"families must lie in [1, {FAMILY_CLASSES}], got {self.families}"
            raise ConfigError(err)
        if min(self.samples_per_family, self.benign_samples, self.byte_motif_length) < 1:
            err = f"synthetic counts must be positive: {self}"
            raise ConfigError(err)
        if not 3 <= self.min_length <= self.max_length:  # noqa: PLR2004
            err = (
                "sample lengths must satisfy 3 <= min <= max, "
                f"got {self.min_length}, {self.max_length}"
            )
            raise ConfigError(err)
        if not 0.0 <= self.noise_fraction < 1.0:
            err = f"noise fraction must lie in [0, 1), got {self.noise_fraction}"
            raise ConfigError(err)

    def class_names(self) -> list[str]:
        """Benign name plus the first `families` MaleVis family names.

        Returns:
            Class names in lexicographic (label) order.
        """
        dataset = reference_data()["dataset"]
        family_names = [name for name in dataset["classes"] if name != dataset["benign"]]
        return sorted([dataset["benign"], *family_names[: self.families]])


# Per-channel brightness levels of the family palettes; benign bytes stay below.
_PALETTE_LEVELS = (72, 148, 224)
_PALETTE_SPREAD = 20
_BENIGN_CEILING = 24


def family_palette(family: int) -> tuple[int, int, int]:
    """Mean (r, g, b) byte values of a family's motif.

    Args:
        family: Family position in generation order.

    Returns:
        A triple unique to the family.
    """
    return next(itertools.islice(itertools.product(_PALETTE_LEVELS, repeat=3), family, None))


def family_motif(rng: np.random.Generator, family: int, length: int) -> bytes:
    """Draw a family's byte motif around its palette.

    Args:
        rng: The corpus generator.
        family: Family position in generation order.
        length: Motif length, a multiple of 3.

    Returns:
        The motif.
    """
    base = np.tile(np.array(family_palette(family)), length // 3)
    jitter = rng.integers(-_PALETTE_SPREAD, _PALETTE_SPREAD + 1, size=length)
    return np.clip(base + jitter, 0, 255).astype(np.uint8).tobytes()


def family_sample(
    rng: np.random.Generator,
    motif: bytes,
    length: int,
    noise_fraction: float,
) -> bytes:
    """Repeat a motif and overwrite a share of it with noise.

    The first motif copy is left intact.

    Args:
        rng: The corpus generator.
        motif: The family motif.
        length: Sample length.
        noise_fraction: Share of bytes replaced.

    Returns:
        The sample bytes.
    """
    stream = np.frombuffer((motif * (length // len(motif) + 1))[:length], dtype=np.uint8).copy()
    mask = rng.random(length) < noise_fraction
    mask[: len(motif)] = False
    stream[mask] = rng.integers(0, 256, size=int(mask.sum()), dtype=np.uint8)
    return stream.tobytes()


def benign_sample(rng: np.random.Generator, length: int) -> bytes:
    """Low-entropy structured bytes: runs of small values and counters.

    Args:
        rng: The corpus generator.
        length: Sample length.

    Returns:
        The sample bytes.
    """
    parts = []
    size = 0
    while size < length:
        run = int(rng.integers(16, 257))
        if rng.random() < 0.5:  # noqa: PLR2004
            chunk = np.full(run, rng.integers(0, _BENIGN_CEILING), dtype=np.uint8)
        else:
            chunk = (np.arange(run) % _BENIGN_CEILING).astype(np.uint8)
        parts.append(chunk)
        size += run
    return np.concatenate(parts)[:length].tobytes()


def synth_samples(spec: SynthSpec) -> dict[str, list[bytes]]:
    """Generate the raw bytes of a synthetic corpus.

    Args:
        spec: The corpus layout.

    Returns:
        Sample bytes per class name.
    """
    rng = np.random.default_rng(spec.seed)
    dataset = reference_data()["dataset"]
    benign = dataset["benign"]
    family_names = [name for name in dataset["classes"] if name != benign][: spec.families]
    motif_length = 3 * math.ceil(spec.byte_motif_length / 3)
    samples: dict[str, list[bytes]] = {}
    for family, name in enumerate(family_names):
        motif = family_motif(rng, family, motif_length)
        lengths = rng.integers(spec.min_length, spec.max_length + 1, size=spec.samples_per_family)
        samples[name] = [family_sample(rng, motif, int(n), spec.noise_fraction) for n in lengths]
    lengths = rng.integers(spec.min_length, spec.max_length + 1, size=spec.benign_samples)
    samples[benign] = [benign_sample(rng, int(n)) for n in lengths]
    return samples


def synth_generate(spec: SynthSpec, out_dir: Path) -> DatasetManifest:
    """Write a synthetic MaleVis-layout corpus.

    Each class gets `out_dir/<class>/<class>-NNNN.png`; the manifest and class
    table are written to `out_dir/manifest.jsonl` and `out_dir/classes.yaml`.

    Args:
        spec: The corpus layout.
        out_dir: Destination directory.

    Returns:
        The manifest, paths relative to `out_dir`.
    """
    samples = synth_samples(spec)
    class_index = ClassIndex.from_names(spec.class_names())
    records = []
    for label, name in enumerate(class_index.names):
        for i, data in enumerate(samples[name]):
            grid = bytes_to_grid(data)
            relative = Path(name) / f"{name}-{i:04d}.png"
            write_png(grid, out_dir / relative)
            records.append(
                ManifestRecord(
                    id=f"{name}/{relative.stem}",
                    path=relative.as_posix(),
                    label=label,
                    pad_bytes=grid.pad_bytes,
                    orig_len=len(data),
                ),
            )
    manifest = DatasetManifest(tuple(records), class_index, out_dir)
    write_manifest(manifest, out_dir / MANIFEST_NAME)
    LOGGER.info(
        "wrote %d synthetic samples in %d classes to %s",
        len(records),
        len(class_index),
        out_dir,
    )
    return manifest
