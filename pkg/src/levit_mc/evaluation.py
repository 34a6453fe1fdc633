"""Cascade accuracy, throughput benchmarking and report rendering."""

from __future__ import annotations

import json
import logging
import time

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Literal, Protocol

import numpy as np

from levit_mc.data import BATCH_SIZE, ImageLoader, reference_data
from levit_mc.errors import ConfigError, EmptyDataset, InvalidInput


if TYPE_CHECKING:
    from collections.abc import Sequence

    from numpy.typing import ArrayLike, NDArray

    from levit_mc.cascade import Verdict
    from levit_mc.data import ClassIndex, DatasetManifest


LOGGER = logging.getLogger(__name__)

MIN_REPETITIONS = 3
RUN_NAME = "this run"
ReportFormat = Literal["json", "markdown"]


class VerdictSource(Protocol):
    """The part of a cascade that evaluation and benchmarking drive."""

    class_index: ClassIndex
    image_size: int

    @property
    def stage2_calls(self) -> int:
        """Images routed to the family model so far."""

    def classify_block(self, images: ArrayLike) -> list[Verdict]:
        """Classify a (N, 3, S, S) batch."""


@dataclass(frozen=True)
class ClassMetrics:
    """Per-class scores.

    Attributes:
        name: Class name.
        support: Samples whose true class this is.
        precision: Correct predictions over predictions of this class, 0 when
            never predicted.
        recall: Correct predictions over support, 0 when the class has no samples.
    """

    name: str
    support: int
    precision: float
    recall: float


@dataclass(frozen=True)
class ThroughputReport:
    """Timed cascade inference.

    Attributes:
        images_per_second: Mean over repetitions.
        images_per_second_std: Sample standard deviation over repetitions.
        batch_size: Images per forward batch.
        warmup_batches: Untimed batches run first.
        repetitions: Timed repetitions.
        stage2_skip_rate: Fraction of timed images that never reached stage 2.
        timings: Images per second of each repetition.
        workers: Threads dispatching batches.
    """

    images_per_second: float
    images_per_second_std: float
    batch_size: int
    warmup_batches: int
    repetitions: int
    stage2_skip_rate: float
    timings: tuple[float, ...] = ()
    workers: int = 1

    def __post_init__(self) -> None:
        """Validate the report.

        Raises:
            InvalidInput: On fewer than three repetitions or a non-positive rate.
        """
        if self.repetitions < MIN_REPETITIONS:
            err = f"throughput needs at least {MIN_REPETITIONS} repetitions, got {self.repetitions}"
            raise InvalidInput(err)
        if not self.images_per_second > 0:
            err = f"images per second must be positive, got {self.images_per_second}"
            raise InvalidInput(err)

    def to_dict(self) -> dict[str, Any]:
        """Plain data for JSON.

        Returns:
            The report fields.
        """
        return {
            "images_per_second": self.images_per_second,
            "images_per_second_std": self.images_per_second_std,
            "batch_size": self.batch_size,
            "warmup_batches": self.warmup_batches,
            "repetitions": self.repetitions,
            "stage2_skip_rate": self.stage2_skip_rate,
            "timings": list(self.timings),
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ThroughputReport:
        """Inverse of `to_dict`.

        Args:
            data: The report fields.

        Returns:
            The report.
        """
        return cls(**{**data, "timings": tuple(data.get("timings", ()))})


@dataclass
class MetricsReport:
    """26-way evaluation of a cascade on one split.

    Attributes:
        class_names: Names in label order; rows and columns of `confusion`.
        confusion: Counts, rows the true class and columns the prediction.
        name: Row label in rendered tables.
        throughput: Benchmark of the same cascade, when one was run.
    """

    class_names: tuple[str, ...]
    confusion: NDArray[np.int64]
    name: str = RUN_NAME
    throughput: ThroughputReport | None = None
    _per_class: list[ClassMetrics] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        """Validate the matrix and derive per-class scores.

        Raises:
            InvalidInput: If the matrix is not square over the classes or holds
                negative counts.
        """
        self.class_names = tuple(self.class_names)
        self.confusion = np.asarray(self.confusion, dtype=np.int64)
        size = len(self.class_names)
        if self.confusion.shape != (size, size) or (self.confusion < 0).any():
            err = f"confusion matrix must be a non-negative {size}x{size} grid"
            raise InvalidInput(err)
        support = self.confusion.sum(axis=1)
        predicted = self.confusion.sum(axis=0)
        hits = np.diag(self.confusion)
        self._per_class = [
            ClassMetrics(
                name,
                int(support[i]),
                float(hits[i] / predicted[i]) if predicted[i] else 0.0,
                float(hits[i] / support[i]) if support[i] else 0.0,
            )
            for i, name in enumerate(self.class_names)
        ]

    @property
    def total(self) -> int:
        """Evaluated samples."""
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        """Trace over total."""
        total = self.total
        return float(np.trace(self.confusion) / total) if total else 0.0

    @property
    def per_class(self) -> list[ClassMetrics]:
        """Precision and recall per class, in label order."""
        return list(self._per_class)

    def to_dict(self) -> dict[str, Any]:
        """Plain data in the report JSON schema.

        Returns:
            `{"name", "accuracy", "per_class", "confusion", "throughput", "references"}`.
        """
        return {
            "name": self.name,
            "accuracy": self.accuracy,
            "per_class": [
                {
                    "name": metrics.name,
                    "support": metrics.support,
                    "precision": metrics.precision,
                    "recall": metrics.recall,
                }
                for metrics in self._per_class
            ],
            "confusion": self.confusion.tolist(),
            "throughput": None if self.throughput is None else self.throughput.to_dict(),
            "references": references(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> MetricsReport:
        """Inverse of `to_dict`; derived fields are recomputed.

        Args:
            data: A report object.

        Returns:
            The report.
        """
        throughput = data.get("throughput")
        return cls(
            tuple(metrics["name"] for metrics in data["per_class"]),
            np.array(data["confusion"], dtype=np.int64),
            data.get("name", RUN_NAME),
            None if throughput is None else ThroughputReport.from_dict(throughput),
        )


@dataclass(frozen=True)
class BenchConfig:
    """Benchmark settings.

    Attributes:
        batch_size: Images per forward batch.
        warmup: Untimed batches run before timing.
        reps: Timed repetitions.
        workers: Threads dispatching batches.
    """

    batch_size: int = BATCH_SIZE
    warmup: int = 1
    reps: int = MIN_REPETITIONS
    workers: int = 1

    def __post_init__(self) -> None:
        """Validate the settings.

        Raises:
            ConfigError: If a value is out of range.
        """
        if self.batch_size < 1 or self.warmup < 0 or self.workers < 1:
            err = f"invalid benchmark settings: {self}"
            raise ConfigError(err)
        if self.reps < MIN_REPETITIONS:
            err = f"reps must be at least {MIN_REPETITIONS}, got {self.reps}"
            raise ConfigError(err)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> BenchConfig:
        """Build from plain data, ignoring unknown keys.

        Args:
            data: Setting values.

        Returns:
            The config.
        """
        known = {key: data[key] for key in cls.__dataclass_fields__ if key in data}
        return cls(**known)


def references() -> dict[str, Any]:
    """Published figures shown next to every report.

    Returns:
        `paper_accuracy` and `paper_ips`, plus the accuracy comparison rows.
    """
    published = reference_data()["references"]
    return {
        "paper_accuracy": published["cascade_accuracy"],
        "paper_ips": published["images_per_second"],
        "accuracy_table": [dict(row) for row in published["accuracy"]],
    }


def _label_map(manifest: DatasetManifest, index: ClassIndex) -> list[int]:
    positions = {name: label for label, name in enumerate(index.names)}
    missing = [name for name in manifest.class_index.names if name not in positions]
    if missing:
        err = f"dataset classes unknown to the cascade: {', '.join(missing)}"
        raise ConfigError(err)
    return [positions[name] for name in manifest.class_index.names]


def predicted_label(verdict: Verdict, index: ClassIndex) -> int:
    """The 26-way label a verdict stands for.

    Args:
        verdict: A cascade verdict.
        index: The cascade's class table.

    Returns:
        The benign label for benign verdicts, else the family's label.
    """
    if verdict.family is None:
        return int(index.benign_index) if index.benign_index is not None else 0
    return index.family_to_label(verdict.family)


def evaluate(
    cascade: VerdictSource,
    manifest: DatasetManifest,
    split: str | None = "val",
    *,
    batch_size: int = BATCH_SIZE,
    loader: ImageLoader | None = None,
) -> MetricsReport:
    """Score a cascade on a labeled split.

    Malware the cascade calls benign is counted in the benign column.

    Args:
        cascade: The cascade.
        manifest: Labeled dataset; class names must exist in the cascade's table.
        split: The split to score, None for every record.
        batch_size: Images per cascade call.
        loader: Decoder; a fresh loader at the cascade's image size by default.

    Returns:
        The report.

    Raises:
        EmptyDataset: If the split has no labeled records.
    """
    records = [record for record in manifest.subset(split) if record.label is not None]
    if not records:
        err = f"split {split!r} has no labeled records"
        raise EmptyDataset(err)
    index = cascade.class_index
    to_cascade = _label_map(manifest, index)
    decoder = loader or ImageLoader(manifest, cascade.image_size)
    chunks = [records[start : start + batch_size] for start in range(0, len(records), batch_size)]
    confusion = np.zeros((len(index), len(index)), dtype=np.int64)
    for chunk, images in zip(chunks, decoder.batches(chunks), strict=True):
        for record, verdict in zip(chunk, cascade.classify_block(images), strict=True):
            confusion[to_cascade[record.label or 0], predicted_label(verdict, index)] += 1
    report = MetricsReport(index.names, confusion)
    LOGGER.info(
        "evaluated %d samples of split %s: accuracy %.4f",
        report.total,
        split,
        report.accuracy,
    )
    return report


def bench_throughput(  # noqa: PLR0913
    cascade: VerdictSource,
    images: ArrayLike,
    batch_size: int = BATCH_SIZE,
    warmup: int = 1,
    reps: int = MIN_REPETITIONS,
    workers: int = 1,
) -> ThroughputReport:
    """Time cascade inference on pre-decoded images.

    The images are cut into full batches. The first `warmup` batches run
    untimed; the rest are divided into `reps` contiguous groups and each group
    is one timed repetition.

    Args:
        cascade: The cascade.
        images: A (N, 3, S, S) array.
        batch_size: Images per forward batch.
        warmup: Untimed batches.
        reps: Timed repetitions, at least three.
        workers: Threads dispatching the batches of a repetition.

    Returns:
        The throughput report.

    Raises:
        InvalidInput: If fewer than `warmup + reps` full batches are available.
    """
    config = BenchConfig(batch_size, warmup, max(reps, MIN_REPETITIONS), workers)
    if reps < MIN_REPETITIONS:
        err = f"reps must be at least {MIN_REPETITIONS}, got {reps}"
        raise InvalidInput(err)
    data = np.asarray(images, dtype=np.float32)
    count = len(data) // config.batch_size
    if count < config.warmup + config.reps:
        err = (
            f"{len(data)} images make {count} batches of {config.batch_size}; "
            f"need {config.warmup + config.reps}"
        )
        raise InvalidInput(err)
    batches = [data[i * config.batch_size : (i + 1) * config.batch_size] for i in range(count)]
    for batch in batches[: config.warmup]:
        cascade.classify_block(batch)
    groups = [list(group) for group in np.array_split(np.arange(config.warmup, count), config.reps)]
    timings = []
    timed = 0
    before = cascade.stage2_calls
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        for group in groups:
            start = time.perf_counter()
            if config.workers == 1:
                for i in group:
                    cascade.classify_block(batches[i])
            else:
                list(pool.map(cascade.classify_block, (batches[i] for i in group)))
            elapsed = max(time.perf_counter() - start, 1e-9)
            timings.append(len(group) * config.batch_size / elapsed)
            timed += len(group) * config.batch_size
    routed = cascade.stage2_calls - before
    rates = np.array(timings)
    report = ThroughputReport(
        images_per_second=float(rates.mean()),
        images_per_second_std=float(rates.std(ddof=1)),
        batch_size=config.batch_size,
        warmup_batches=config.warmup,
        repetitions=config.reps,
        stage2_skip_rate=1.0 - routed / timed,
        timings=tuple(float(rate) for rate in timings),
        workers=config.workers,
    )
    LOGGER.info(
        "throughput %.1f +/- %.1f images/s, stage-2 skip rate %.3f",
        report.images_per_second,
        report.images_per_second_std,
        report.stage2_skip_rate,
    )
    return report


def _percent(value: float) -> str:
    return f"{value:.2f}"


def _markdown(runs: Sequence[MetricsReport]) -> str:
    lines = ["| System | Accuracy (%) | Images/s |", "| --- | ---: | ---: |"]
    if not runs:
        return "\n".join(lines) + "\n"
    published = references()
    for row in published["accuracy_table"]:
        ips = row.get("images_per_second", "-")
        lines.append(f"| {row['system']} | {_percent(row['accuracy'])} | {ips} |")
    for run in runs:
        ips = "-"
        if run.throughput is not None:
            bench = run.throughput
            ips = f"{bench.images_per_second:.1f} ± {bench.images_per_second_std:.1f}"
        lines.append(f"| {run.name} | {_percent(100 * run.accuracy)} | {ips} |")
    for run in runs:
        lines += [
            "",
            f"### {run.name}: per-class",
            "",
            "| Class | Support | Precision | Recall |",
            "| --- | ---: | ---: | ---: |",
        ]
        lines += [
            f"| {m.name} | {m.support} | {m.precision:.4f} | {m.recall:.4f} |"
            for m in run.per_class
        ]
        if run.throughput is not None:
            lines += ["", f"Stage-2 skip rate: {run.throughput.stage2_skip_rate:.4f}"]
    lines += ["", "Published rows are reference figures and were not measured here."]
    return "\n".join(lines) + "\n"


def emit_report(runs: Sequence[MetricsReport], fmt: ReportFormat = "markdown") -> str:
    """Render reports.

    Args:
        runs: Reports to render, appended after the published rows.
        fmt: "json" for one report object per line, "markdown" for tables.

    Returns:
        The document; identical inputs render identical text.

    Raises:
        InvalidInput: On an unknown format.
    """
    if fmt == "json":
        return "".join(json.dumps(run.to_dict(), sort_keys=True) + "\n" for run in runs)
    if fmt == "markdown":
        return _markdown(runs)
    err = f"unknown report format {fmt!r}"
    raise InvalidInput(err)


def paired_speedup(benign: ThroughputReport, malign: ThroughputReport) -> float:
    """Ratio of all-benign to all-malign throughput.

    Args:
        benign: Benchmark on benign-only images.
        malign: Benchmark on malign-only images of the same count.

    Returns:
        The ratio; above 1 when skipping stage 2 pays off.
    """
    return benign.images_per_second / malign.images_per_second
