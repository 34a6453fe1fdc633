"""Two-stage classification: benign/malign triage, then family assignment."""

from __future__ import annotations

import json
import logging
import shutil
import threading

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Any, Protocol

import numpy as np
import yaml

from levit_mc.bin2img import IMAGE_SIZE
from levit_mc.checkpoint import load_checkpoint, model_from_checkpoint
from levit_mc.data import FAMILY_CLASSES, MALEVIS_CLASSES, ClassIndex
from levit_mc.errors import ConfigError, InvalidInput, IoError, ShapeError
from levit_mc.models import Mode
from levit_mc.tensor import Tensor, softmax


if TYPE_CHECKING:
    from collections.abc import Sequence
    from pathlib import Path

    from numpy.typing import ArrayLike, NDArray


LOGGER = logging.getLogger(__name__)

BENIGN_THRESHOLD = 0.5
BINARY_CLASSES = 2
STAGE1_NAME = "stage1.lmck"
STAGE2_NAME = "stage2.lmck"
CASCADE_NAME = "cascade.yaml"


class Classifier(Protocol):
    """What the cascade needs from a stage model."""

    @property
    def num_classes(self) -> int:
        """Width of the logits."""

    def forward(self, batch: Tensor, mode: Mode = Mode.EVAL) -> Tensor:
        """Compute logits for a (N, 3, S, S) batch."""


class VerdictKind(str, Enum):
    """Outcome of the triage stage."""

    BENIGN = "benign"
    MALIGN = "malign"


@dataclass(frozen=True)
class Verdict:
    """Cascade output for one image.

    Attributes:
        kind: Benign or malign.
        family: Family index in [0, 25), present exactly for malign verdicts.
        confidence: Probability of the reported outcome, in (0, 1].
        stage1_prob_malign: Triage probability of the malign class.
    """

    kind: VerdictKind
    family: int | None
    confidence: float
    stage1_prob_malign: float

    def __post_init__(self) -> None:
        """Validate the verdict.

        Raises:
            InvalidInput: If the family does not match the kind or a probability
                is out of range.
        """
        if (self.family is not None) != (self.kind is VerdictKind.MALIGN):
            err = f"a {self.kind.value} verdict cannot carry family {self.family}"
            raise InvalidInput(err)
        if self.family is not None and not 0 <= self.family < FAMILY_CLASSES:
            err = f"family {self.family} outside [0, {FAMILY_CLASSES})"
            raise InvalidInput(err)
        if not 0.0 < self.confidence <= 1.0 or not 0.0 <= self.stage1_prob_malign <= 1.0:
            err = (
                "verdict probabilities out of range: "
                f"{self.confidence}, {self.stage1_prob_malign}"
            )
            raise InvalidInput(err)

    def to_dict(self, sample_id: str, class_index: ClassIndex) -> dict[str, Any]:
        """Plain-data form for JSON lines.

        Args:
            sample_id: Identifier of the classified sample.
            class_index: Table used to name the family.

        Returns:
            `{"id", "verdict", "family", "confidence", "p_malign"}`.
        """
        family = None if self.family is None else class_index.families[self.family]
        return {
            "id": sample_id,
            "verdict": self.kind.value,
            "family": family,
            "confidence": self.confidence,
            "p_malign": self.stage1_prob_malign,
        }

    def to_json(self, sample_id: str, class_index: ClassIndex) -> str:
        """Serialize to one JSON line.

        Args:
            sample_id: Identifier of the classified sample.
            class_index: Table used to name the family.

        Returns:
            The JSON object text.
        """
        return json.dumps(self.to_dict(sample_id, class_index))


def _probabilities(logits: Tensor) -> NDArray[np.float64]:
    return softmax(Tensor(logits.data, dtype=np.float64), axis=1).data


class CascadeModel:
    """DenseNet triage followed by LeViT family assignment for malign images.

    The family model runs only for images whose malign probability reaches the
    threshold; `stage2_calls` counts the images it has seen.

    Attributes:
        binary_model: Two-class model, logits ordered (benign, malign).
        family_model: 25-class model.
        benign_threshold: Malign probability at which stage 2 runs.
        class_index: 26-entry table (benign plus 25 families).
        image_size: Side of the images both models expect.
    """

    def __init__(
        self,
        binary_model: Classifier,
        family_model: Classifier,
        benign_threshold: float = BENIGN_THRESHOLD,
        class_index: ClassIndex | None = None,
        image_size: int = IMAGE_SIZE,
    ) -> None:
        """Initialize the cascade.

        Args:
            binary_model: Two-class model.
            family_model: 25-class model.
            benign_threshold: Malign probability at which stage 2 runs, in (0, 1).
            class_index: 26-entry class table; MaleVis by default.
            image_size: Side of the images both models expect.

        Raises:
            ConfigError: If a head has the wrong width, or the threshold or the class
                table is invalid.
        """
        if binary_model.num_classes != BINARY_CLASSES:
            err = f"the triage model must have 2 outputs, got {binary_model.num_classes}"
            raise ConfigError(err)
        if family_model.num_classes != FAMILY_CLASSES:
            err = f"the family model must have 25 outputs, got {family_model.num_classes}"
            raise ConfigError(err)
        if not 0.0 < benign_threshold < 1.0:
            err = f"benign threshold must lie in (0, 1), got {benign_threshold}"
            raise ConfigError(err)
        index = class_index or ClassIndex.malevis()
        if len(index) != MALEVIS_CLASSES or index.benign_index is None:
            err = f"the cascade needs 26 classes with one benign, got {len(index)}"
            raise ConfigError(err)
        self.binary_model = binary_model
        self.family_model = family_model
        self.benign_threshold = benign_threshold
        self.class_index = index
        self.image_size = image_size
        self._stage2_calls = 0
        self._lock = threading.Lock()

    @property
    def stage2_calls(self) -> int:
        """Images routed to the family model so far."""
        with self._lock:
            return self._stage2_calls

    def _check(self, images: NDArray[np.floating]) -> None:
        expected = (3, self.image_size, self.image_size)
        if images.ndim != 4 or images.shape[1:] != expected:  # noqa: PLR2004
            err = f"expected images of shape (N, *{expected}), got {images.shape}"
            raise ShapeError(err)

    def malign_probability(self, images: ArrayLike) -> NDArray[np.float64]:
        """Triage probabilities of the malign class.

        Args:
            images: A (N, 3, S, S) batch.

        Returns:
            One probability per image.
        """
        batch = np.asarray(images, dtype=np.float32)
        self._check(batch)
        return _probabilities(self.binary_model.forward(Tensor(batch), Mode.EVAL))[:, 1]

    def classify_block(self, images: ArrayLike) -> list[Verdict]:
        """Classify a batch with one forward pass per stage.

        Args:
            images: A (N, 3, S, S) batch.

        Returns:
            One verdict per image, in order.
        """
        batch = np.asarray(images, dtype=np.float32)
        self._check(batch)
        if batch.shape[0] == 0:
            return []
        p_malign = self.malign_probability(batch)
        routed = np.flatnonzero(p_malign >= self.benign_threshold)
        verdicts: list[Verdict | None] = [None] * len(p_malign)
        for i in np.flatnonzero(p_malign < self.benign_threshold):
            p = float(p_malign[i])
            verdicts[i] = Verdict(VerdictKind.BENIGN, None, 1.0 - p, p)
        if routed.size:
            with self._lock:
                self._stage2_calls += int(routed.size)
            probs = _probabilities(self.family_model.forward(Tensor(batch[routed]), Mode.EVAL))
            for row, i in enumerate(routed):
                family = int(np.argmax(probs[row]))
                confidence = float(probs[row, family])
                verdicts[i] = Verdict(VerdictKind.MALIGN, family, confidence, float(p_malign[i]))
        return [verdict for verdict in verdicts if verdict is not None]

    def classify(self, image: ArrayLike | Tensor) -> Verdict:
        """Classify one image.

        Args:
            image: A (3, S, S) image.

        Returns:
            The verdict.
        """
        data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
        return self.classify_block(data[None])[0]

    def classify_batch(
        self,
        images: Sequence[ArrayLike | Tensor],
        workers: int = 1,
    ) -> list[Verdict]:
        """Classify images one by one, fanning out over worker threads.

        Args:
            images: (3, S, S) images.
            workers: Threads; verdict order always follows `images`.

        Returns:
            One verdict per image, identical to calling `classify` on each.
        """
        if workers <= 1 or len(images) < 2:  # noqa: PLR2004
            return [self.classify(image) for image in images]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(self.classify, images))


def save_cascade(  # noqa: PLR0913
    directory: Path,
    stage1: Path,
    stage2: Path,
    *,
    class_index: ClassIndex,
    benign_threshold: float = BENIGN_THRESHOLD,
    image_size: int = IMAGE_SIZE,
) -> Path:
    """Assemble a cascade directory from two stage checkpoints.

    Args:
        directory: Destination directory.
        stage1: Triage checkpoint file.
        stage2: Family checkpoint file.
        class_index: Class table; padded to 26 entries.
        benign_threshold: Malign probability at which stage 2 runs.
        image_size: Side of the images both models expect.

    Returns:
        The path of the written `cascade.yaml`.

    Raises:
        IoError: If a file cannot be copied or written.
    """
    manifest = {
        "threshold": benign_threshold,
        "image_size": image_size,
        "stage1": STAGE1_NAME,
        "stage2": STAGE2_NAME,
        **class_index.padded(MALEVIS_CLASSES).to_dict(),
    }
    target = directory / CASCADE_NAME
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for source, name in ((stage1, STAGE1_NAME), (stage2, STAGE2_NAME)):
            if source.resolve() != (directory / name).resolve():
                shutil.copyfile(source, directory / name)
        target.write_text(yaml.safe_dump(manifest, sort_keys=False), encoding="utf-8")
    except OSError as exc:
        err = f"cannot write cascade to {directory}: {exc.strerror or exc}"
        raise IoError(err) from exc
    return target


def load_cascade(directory: Path) -> CascadeModel:
    """Load a cascade directory written by `save_cascade`.

    Args:
        directory: Directory holding `cascade.yaml` and both checkpoints.

    Returns:
        The cascade.

    Raises:
        IoError: If `cascade.yaml` cannot be read.
        ConfigError: If it is malformed.
    """
    try:
        data = yaml.safe_load((directory / CASCADE_NAME).read_text(encoding="utf-8"))
    except OSError as exc:
        err = f"cannot read {directory / CASCADE_NAME}: {exc.strerror or exc}"
        raise IoError(err) from exc
    if not isinstance(data, dict) or "classes" not in data:
        err = f"{directory / CASCADE_NAME} is not a cascade description"
        raise ConfigError(err)
    binary = model_from_checkpoint(load_checkpoint(directory / data.get("stage1", STAGE1_NAME)))
    family = model_from_checkpoint(load_checkpoint(directory / data.get("stage2", STAGE2_NAME)))
    LOGGER.info("loaded cascade %s (%s, %s)", directory, binary.arch, family.arch)
    return CascadeModel(
        binary,
        family,
        benign_threshold=float(data.get("threshold", BENIGN_THRESHOLD)),
        class_index=ClassIndex.from_dict(data),
        image_size=int(data.get("image_size", IMAGE_SIZE)),
    )
