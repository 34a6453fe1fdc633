"""Train one cascade stage."""

from __future__ import annotations

import json
import logging

from typing import TYPE_CHECKING, Any

from levit_mc.checkpoint import load_checkpoint, model_from_checkpoint
from levit_mc.config import build_config, env_seed, load_file, parse_overrides
from levit_mc.data import FAMILY_CLASSES, binary_view, family_view, read_manifest
from levit_mc.models import densenet, levit
from levit_mc.models.densenet import BINARY_CLASSES, build_densenet
from levit_mc.models.levit import build_levit
from levit_mc.train import BEST_NAME, fine_tune, head_only_prefixes, train_model
from levit_mc.utils import Colors, echo, write_output


if TYPE_CHECKING:
    from pathlib import Path

    from levit_mc.models import ModelGraph
    from levit_mc.train import TrainConfig


LOGGER = logging.getLogger(__name__)

# stage -> (model config section, architecture tag, head width)
STAGES = {
    "stage1": ("densenet", densenet.ARCH, BINARY_CLASSES),
    "stage2": ("levit", levit.ARCH, FAMILY_CLASSES),
}


class Train:
    """Train the triage or the family model."""

    def __init__(  # noqa: PLR0913
        self,
        stage: str,
        data: Path,
        out: Path,
        epochs: int | None = None,
        lr: float | None = None,
        resume: Path | None = None,
        init: Path | None = None,
        freeze_backbone: bool = False,  # noqa: FBT001, FBT002
        config: Path | None = None,
        overrides: list[str] | None = None,
        seed: int | None = None,
        workers: int = 1,
    ) -> None:
        """Initialize the training run.

        Args:
            stage: "stage1" or "stage2".
            data: Split manifest with the full class table.
            out: Directory for checkpoints and the metric log.
            epochs: Sets `train.max_epochs`.
            lr: Sets `train.lr0`.
            resume: Checkpoint to continue from.
            init: Checkpoint whose weights start a fine-tuning run.
            freeze_backbone: With `init`, update only the head.
            config: YAML config file.
            overrides: `--key=value` tokens.
            seed: Run seed; falls back to `LMCK_SEED`.
            workers: Image decoder threads.
        """
        self.stage = stage
        self.data = data
        self.out = out
        self.resume = resume
        self.init = init
        self.freeze_backbone = freeze_backbone
        self.section, self.arch, self.classes = STAGES[stage]
        layer = load_file(config)
        parsed = parse_overrides(overrides or [], ["train", self.section])
        self.train_config: TrainConfig = build_config(
            "train",
            layer,
            parsed,
            max_epochs=epochs,
            lr0=lr,
            seed=env_seed(seed),
            workers=workers,
        )
        self.model_config = build_config(self.section, layer, parsed)

    def _build(self) -> ModelGraph:
        seed = self.train_config.seed
        if self.section == "densenet":
            return build_densenet(self.model_config, seed)
        return build_levit(self.model_config, seed, self.train_config.image_size)

    def run(self) -> None:
        """Train and write `last.lmck`, `best.lmck` and `metrics.csv`."""
        manifest = read_manifest(self.data)
        view = binary_view(manifest) if self.stage == "stage1" else family_view(manifest)
        LOGGER.info("training %s on %d records", self.arch, len(view))
        if self.init is not None:
            base = load_checkpoint(self.init)
            frozen = None
            if self.freeze_backbone:
                frozen = head_only_prefixes(model_from_checkpoint(base))
            result = fine_tune(
                base,
                view,
                self.train_config,
                new_head_classes=self.classes,
                freeze_prefixes=frozen,
                target_arch=self.arch,
                out_dir=self.out,
            )
        else:
            resume = load_checkpoint(self.resume) if self.resume is not None else None
            result = train_model(
                self._build(),
                view,
                self.train_config,
                resume=resume,
                out_dir=self.out,
            )
        best_accuracy = float(result.best.train_state.get("best_accuracy", 0.0))
        summary: dict[str, Any] = {
            "stage": self.stage,
            "arch": self.arch,
            "epochs": result.last.epoch,
            "best": (self.out / BEST_NAME).as_posix(),
            "best_accuracy": best_accuracy,
        }
        write_output(json.dumps(summary) + "\n", None)
        echo(
            f"{self.stage}: {result.last.epoch} epochs, best accuracy {best_accuracy:.4f}",
            Colors.GREEN,
        )
