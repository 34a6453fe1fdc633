"""Adam, plateau learning-rate decay and the epoch loop for both cascade stages."""

from __future__ import annotations

import csv
import logging
import math

from dataclasses import asdict, dataclass, field, fields, replace
from typing import TYPE_CHECKING, Any

import numpy as np

from levit_mc.bin2img import IMAGE_SIZE
from levit_mc.checkpoint import (
    Checkpoint,
    OptimizerSnapshot,
    checkpoint_from_model,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from levit_mc.data import BATCH_SIZE, ImageLoader, iterate_batches
from levit_mc.errors import ConfigError, EmptyDataset, InvalidInput, NumericError, ShapeError
from levit_mc.models import HEAD_PREFIX, Mode
from levit_mc.tensor import Tensor, cross_entropy


if TYPE_CHECKING:
    from collections.abc import Callable, Iterable, Mapping
    from pathlib import Path

    from numpy.typing import NDArray

    from levit_mc.data import DatasetManifest
    from levit_mc.models import ModelGraph


LOGGER = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
METRIC_FIELDS = ("epoch", "split", "loss", "accuracy", "lr")
LAST_NAME = "last.lmck"
BEST_NAME = "best.lmck"
METRICS_NAME = "metrics.csv"


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings.

    Attributes:
        batch_size: Samples per update.
        lr0: Initial learning rate.
        plateau_factor: Learning-rate multiplier applied on a plateau.
        plateau_patience: Non-improving epochs tolerated before a decay.
        min_delta: Validation-accuracy gain that counts as an improvement.
        max_epochs: Epochs to run, counting epochs of a resumed run.
        seed: Seeds model initialization and batch shuffling.
        freeze_prefixes: Parameter-name prefixes excluded from updates.
        image_size: Side of the images fed to the model.
        workers: Image decoder threads.
    """

    batch_size: int = BATCH_SIZE
    lr0: float = 1e-5
    plateau_factor: float = 0.1
    plateau_patience: int = 10
    min_delta: float = 1e-4
    max_epochs: int = 10
    seed: int = 0
    freeze_prefixes: tuple[str, ...] = ()
    image_size: int = IMAGE_SIZE
    workers: int = 1

    def __post_init__(self) -> None:
        """Validate the settings.

        Raises:
            ConfigError: If a value is out of range.
        """
        object.__setattr__(self, "freeze_prefixes", tuple(str(p) for p in self.freeze_prefixes))
        if self.lr0 <= 0.0:
            err = f"lr0 must be positive, got {self.lr0}"
            raise ConfigError(err)
        if not 0.0 < self.plateau_factor < 1.0:
            err = f"plateau_factor must lie in (0, 1), got {self.plateau_factor}"
            raise ConfigError(err)
        if self.plateau_patience < 1:
            err = f"plateau_patience must be at least 1, got {self.plateau_patience}"
            raise ConfigError(err)
        counts = (self.batch_size, self.image_size, self.workers)
        if min(counts) < 1 or self.max_epochs < 0 or self.min_delta < 0:
            err = f"invalid training counts: {self}"
            raise ConfigError(err)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TrainConfig:
        """Build a config from plain data, ignoring unknown keys.

        Args:
            data: Plain config data.

        Returns:
            The config.
        """
        known = {f.name for f in fields(cls)}
        return cls(**{key: value for key, value in data.items() if key in known})

    def to_dict(self) -> dict[str, Any]:
        """Plain-data echo.

        Returns:
            The config as a dict with lists.
        """
        data = asdict(self)
        data["freeze_prefixes"] = list(self.freeze_prefixes)
        return data


def is_frozen(name: str, prefixes: Iterable[str]) -> bool:
    """Whether a parameter is excluded from updates.

    Args:
        name: Parameter name.
        prefixes: Frozen name prefixes.

    Returns:
        True if any prefix matches.
    """
    return any(name.startswith(prefix) for prefix in prefixes)


def head_only_prefixes(model: ModelGraph) -> tuple[str, ...]:
    """Freeze prefixes that leave only the linear head trainable.

    Args:
        model: The model.

    Returns:
        Every non-head parameter name.
    """
    return tuple(name for name in model.params if not name.startswith(f"{HEAD_PREFIX}."))


@dataclass
class AdamState:
    """Adam moments, kept in the dtype of their parameters.

    Attributes:
        first: First moments by parameter name.
        second: Second moments by parameter name.
        step: Updates applied so far.
        freeze_prefixes: Parameters left untouched, moments included.
        beta1: First-moment decay.
        beta2: Second-moment decay.
        eps: Denominator offset.
    """

    first: dict[str, NDArray[np.floating]]
    second: dict[str, NDArray[np.floating]]
    step: int = 0
    freeze_prefixes: tuple[str, ...] = ()
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def fresh(cls, params: Mapping[str, Tensor], freeze_prefixes: Iterable[str] = ()) -> AdamState:
        """Zero moments for a parameter set.

        Args:
            params: The parameters.
            freeze_prefixes: Parameters excluded from updates.

        Returns:
            The state.
        """
        return cls(
            first={name: np.zeros_like(tensor.data) for name, tensor in params.items()},
            second={name: np.zeros_like(tensor.data) for name, tensor in params.items()},
            freeze_prefixes=tuple(freeze_prefixes),
        )

    def snapshot(self) -> OptimizerSnapshot:
        """Copy the state for a checkpoint.

        Returns:
            The snapshot.
        """
        return OptimizerSnapshot(
            step=self.step,
            first={name: array.astype(np.float32) for name, array in self.first.items()},
            second={name: array.astype(np.float32) for name, array in self.second.items()},
        )

    @classmethod
    def from_snapshot(
        cls,
        snapshot: OptimizerSnapshot,
        params: Mapping[str, Tensor],
        freeze_prefixes: Iterable[str] = (),
    ) -> AdamState:
        """Restore a checkpointed state.

        Args:
            snapshot: The saved state.
            params: The parameters it belongs to.
            freeze_prefixes: Parameters excluded from updates.

        Returns:
            The state.

        Raises:
            ConfigError: If the snapshot does not cover the parameters.
        """
        if set(snapshot.first) != set(params) or set(snapshot.second) != set(params):
            err = "optimizer state does not match the model parameters"
            raise ConfigError(err)
        return cls(
            first={name: snapshot.first[name].astype(t.dtype) for name, t in params.items()},
            second={name: snapshot.second[name].astype(t.dtype) for name, t in params.items()},
            step=snapshot.step,
            freeze_prefixes=tuple(freeze_prefixes),
        )


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, NDArray[np.floating] | None],
    state: AdamState,
    lr: float,
) -> AdamState:
    """Apply one bias-corrected Adam update in place.

    The update is computed in float64 and stored in each parameter's dtype.
    Frozen parameters and their moments are not touched; a missing gradient is
    treated as zero.

    Args:
        params: Parameters by name.
        grads: Gradients by name.
        state: Moments, advanced by one step.
        lr: Learning rate.

    Returns:
        The advanced state.

    Raises:
        ShapeError: If a gradient or moment shape differs from its parameter.
    """
    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for name, tensor in params.items():
        if is_frozen(name, state.freeze_prefixes):
            continue
        grad = grads.get(name)
        g = np.zeros(tensor.shape) if grad is None else np.asarray(grad, dtype=np.float64)
        if g.shape != tensor.shape or state.first[name].shape != tensor.shape:
            err = f"adam: {name} has shape {tensor.shape}, gradient {g.shape}"
            raise ShapeError(err)
        first = state.beta1 * state.first[name].astype(np.float64) + (1.0 - state.beta1) * g
        second = state.beta2 * state.second[name].astype(np.float64) + (1.0 - state.beta2) * g * g
        update = lr * (first / correction1) / (np.sqrt(second / correction2) + state.eps)
        tensor.data[...] = (tensor.data.astype(np.float64) - update).astype(tensor.dtype)
        state.first[name] = first.astype(tensor.dtype)
        state.second[name] = second.astype(tensor.dtype)
    return state


@dataclass(frozen=True)
class PlateauState:
    """Learning-rate decay on a validation-accuracy plateau.

    Attributes:
        lr: Current learning rate.
        factor: Multiplier applied on a plateau.
        patience: Non-improving epochs tolerated.
        min_delta: Gain that counts as an improvement (strictly exceeded).
        best: Best metric so far.
        counter: Epochs since the last improvement.
        decays: Decay events so far.
    """

    lr: float
    factor: float = 0.1
    patience: int = 10
    min_delta: float = 1e-4
    best: float = -math.inf
    counter: int = 0
    decays: int = 0

    @classmethod
    def from_config(cls, config: TrainConfig) -> PlateauState:
        """Initial state of a run.

        Args:
            config: The run settings.

        Returns:
            The state.
        """
        return cls(config.lr0, config.plateau_factor, config.plateau_patience, config.min_delta)

    def to_dict(self) -> dict[str, Any]:
        """Plain data for checkpoints.

        Returns:
            The fields.
        """
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PlateauState:
        """Inverse of `to_dict`.

        Args:
            data: The fields.

        Returns:
            The state.
        """
        return cls(**data)


def plateau_step(state: PlateauState, val_metric: float) -> PlateauState:
    """Advance the scheduler by one epoch (mode: maximize).

    Args:
        state: The current state.
        val_metric: This epoch's validation accuracy.

    Returns:
        The next state.

    Raises:
        InvalidInput: If the metric is not finite.
    """
    if not math.isfinite(val_metric):
        err = f"plateau metric must be finite, got {val_metric}"
        raise InvalidInput(err)
    if val_metric > state.best + state.min_delta:
        return replace(state, best=val_metric, counter=0)
    counter = state.counter + 1
    if counter > state.patience:
        return replace(state, lr=state.lr * state.factor, counter=0, decays=state.decays + 1)
    return replace(state, counter=counter)


class TrainingDiverged(NumericError):  # noqa: N818
    """A non-finite value ended training.

    Attributes:
        last_good: Checkpoint of the last completed epoch.
    """

    def __init__(self, message: str, last_good: Checkpoint) -> None:
        """Initialize the error.

        Args:
            message: The error text.
            last_good: Checkpoint of the last completed epoch.
        """
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainResult:
    """Outcome of a training run.

    Attributes:
        best: Checkpoint with the best validation accuracy.
        last: Checkpoint after the final epoch.
        history: Metric log rows, two per epoch.
    """

    best: Checkpoint
    last: Checkpoint
    history: list[dict[str, Any]] = field(default_factory=list)


class MetricLog:
    """Append-only CSV metric log with header `epoch,split,loss,accuracy,lr`."""

    def __init__(self, path: Path) -> None:
        """Initialize the log.

        Args:
            path: The CSV file; created with a header when missing.
        """
        self.path = path

    def append(self, rows: Iterable[Mapping[str, Any]]) -> None:
        """Append rows.

        Args:
            rows: Metric rows with the log fields.
        """
        new = not self.path.exists()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", newline="", encoding="utf-8") as stream:
            writer = csv.DictWriter(stream, fieldnames=METRIC_FIELDS, extrasaction="ignore")
            if new:
                writer.writeheader()
            writer.writerows(rows)


def predict(model: ModelGraph, images: NDArray[np.float32]) -> NDArray[np.floating]:
    """Eval-mode logits for a batch.

    Args:
        model: The model.
        images: A (N, 3, S, S) batch.

    Returns:
        The (N, C) logits.
    """
    return model.forward(Tensor(images), Mode.EVAL).data


def _measure(
    model: ModelGraph,
    manifest: DatasetManifest,
    split: str,
    config: TrainConfig,
    loader: ImageLoader,
) -> tuple[float, float]:
    total_loss = 0.0
    correct = 0
    count = 0
    batches = iterate_batches(manifest, split, config.batch_size, config.seed, 0, loader=loader)
    for images, labels in batches:
        logits = model.forward(Tensor(images), Mode.EVAL)
        total_loss += cross_entropy(logits, labels).item() * len(labels)
        correct += int((np.argmax(logits.data, axis=1) == labels).sum())
        count += len(labels)
    return total_loss / count, correct / count


def train_model(  # noqa: PLR0913
    model: ModelGraph,
    manifest: DatasetManifest,
    config: TrainConfig,
    *,
    resume: Checkpoint | None = None,
    out_dir: Path | None = None,
    loader: ImageLoader | None = None,
    on_epoch: Callable[[Checkpoint], None] | None = None,
) -> TrainResult:
    """Train on the train split, scheduling the learning rate on val accuracy.

    Each epoch logs one train and one val row. With `out_dir`, the last and best
    checkpoints and the CSV metric log are written after every epoch. When the
    manifest has no val records the train accuracy drives the scheduler.

    Args:
        model: The model; its parameters are updated in place.
        manifest: A split manifest whose labels fit the model head.
        config: The run settings.
        resume: Continue from this checkpoint instead of the model's state.
        out_dir: Directory for checkpoints and the metric log.
        loader: Image decoder; built from the config when unset.
        on_epoch: Called with the last checkpoint after every epoch.

    Returns:
        The best and last checkpoints and the metric history.

    Raises:
        ConfigError: If the labels do not fit the head or the resume checkpoint differs.
        EmptyDataset: If the train split is empty.
        TrainingDiverged: If a non-finite value appears.
    """
    if len(manifest.class_index) > model.num_classes:
        classes = len(manifest.class_index)
        err = f"{classes} dataset classes do not fit a {model.num_classes}-class head"
        raise ConfigError(err)
    if not manifest.subset("train"):
        err = "the manifest has no train records"
        raise EmptyDataset(err)
    has_val = bool(manifest.subset("val"))
    if not has_val:
        LOGGER.warning("no val records, the scheduler follows train accuracy")
    loader = loader or ImageLoader(manifest, config.image_size, workers=config.workers)

    history: list[dict[str, Any]] = []
    start = 0
    plateau = PlateauState.from_config(config)
    adam = AdamState.fresh(model.params, config.freeze_prefixes)
    best_accuracy = -math.inf
    if resume is not None:
        if resume.arch != model.arch:
            err = f"cannot resume a {model.arch} model from a {resume.arch} checkpoint"
            raise ConfigError(err)
        restored = model_from_checkpoint(resume)
        model.params, model.buffers = restored.params, restored.buffers
        if resume.optimizer is not None:
            adam = AdamState.from_snapshot(resume.optimizer, model.params, config.freeze_prefixes)
        if "plateau" in resume.train_state:
            plateau = PlateauState.from_dict(resume.train_state["plateau"])
        best_accuracy = float(resume.train_state.get("best_accuracy", -math.inf))
        history = list(resume.history)
        start = resume.epoch

    def snapshot(epoch: int) -> Checkpoint:
        state = {
            "plateau": plateau.to_dict(),
            "best_accuracy": best_accuracy,
            "train": config.to_dict(),
        }
        return checkpoint_from_model(
            model,
            epoch=epoch,
            history=history,
            train_state=state,
            optimizer=adam.snapshot(),
        )

    last = snapshot(start)
    best = last
    if resume is not None and out_dir is not None and (out_dir / BEST_NAME).is_file():
        best = load_checkpoint(out_dir / BEST_NAME)
    metrics = MetricLog(out_dir / METRICS_NAME) if out_dir is not None else None

    for epoch in range(start, config.max_epochs):
        total_loss = 0.0
        correct = 0
        count = 0
        lr = plateau.lr
        try:
            for images, labels in iterate_batches(
                manifest, "train", config.batch_size, config.seed, epoch, loader=loader
            ):
                logits = model.forward(Tensor(images), Mode.TRAIN)
                loss = cross_entropy(logits, labels)
                model.zero_grad()
                loss.backward()
                grads = {name: p.grad for name, p in model.params.items()}
                adam_step(model.params, grads, adam, lr)
                total_loss += loss.item() * len(labels)
                correct += int((np.argmax(logits.data, axis=1) == labels).sum())
                count += len(labels)
            train_loss, train_accuracy = total_loss / count, correct / count
            if has_val:
                val_loss, val_accuracy = _measure(model, manifest, "val", config, loader)
            else:
                val_loss, val_accuracy = train_loss, train_accuracy
            for name, tensor in model.params.items():
                if not np.isfinite(tensor.data).all():
                    err = f"parameter {name} became non-finite"
                    raise NumericError(err)  # noqa: TRY301
        except NumericError as exc:
            err = f"training diverged in epoch {epoch + 1}: {exc}"
            LOGGER.error(err)  # noqa: TRY400
            raise TrainingDiverged(err, last) from exc

        rows = [
            {
                "epoch": epoch + 1,
                "split": "train",
                "loss": train_loss,
                "accuracy": train_accuracy,
                "lr": lr,
            },
            {
                "epoch": epoch + 1,
                "split": "val",
                "loss": val_loss,
                "accuracy": val_accuracy,
                "lr": lr,
            },
        ]
        history.extend(rows)
        plateau = plateau_step(plateau, val_accuracy)
        LOGGER.info(
            "epoch %d: train loss %.4f acc %.4f, val loss %.4f acc %.4f, lr %.3g",
            epoch + 1,
            train_loss,
            train_accuracy,
            val_loss,
            val_accuracy,
            lr,
        )
        if plateau.lr < lr:
            LOGGER.warning(
                "validation accuracy plateaued, learning rate %.3g -> %.3g",
                lr,
                plateau.lr,
            )
        improved = val_accuracy > best_accuracy
        if improved:
            best_accuracy = val_accuracy
        last = snapshot(epoch + 1)
        if improved:
            best = last
        if metrics is not None and out_dir is not None:
            save_checkpoint(last, out_dir / LAST_NAME)
            if improved:
                save_checkpoint(best, out_dir / BEST_NAME)
            metrics.append(rows)
        if on_epoch is not None:
            on_epoch(last)

    if out_dir is not None and config.max_epochs <= start:
        save_checkpoint(last, out_dir / LAST_NAME)
        save_checkpoint(best, out_dir / BEST_NAME)
    return TrainResult(best=best, last=last, history=history)


def fine_tune(  # noqa: PLR0913
    base: Checkpoint,
    manifest: DatasetManifest,
    config: TrainConfig,
    *,
    new_head_classes: int,
    freeze_prefixes: Iterable[str] | None = None,
    target_arch: str | None = None,
    out_dir: Path | None = None,
) -> TrainResult:
    """Swap the head of a trained model and train it on new data.

    Args:
        base: The starting checkpoint.
        manifest: A split manifest for the new task.
        config: The run settings; `freeze_prefixes` overrides its prefixes.
        new_head_classes: Width of the new head.
        freeze_prefixes: Parameter-name prefixes to keep fixed.
        target_arch: Architecture the caller expects the base to be.
        out_dir: Directory for checkpoints and the metric log.

    Returns:
        The training outcome.

    Raises:
        ConfigError: If the base architecture differs from `target_arch`.
    """
    if target_arch is not None and base.arch != target_arch:
        err = f"cannot fine-tune a {base.arch} checkpoint as {target_arch}"
        raise ConfigError(err)
    model = model_from_checkpoint(base).with_head(new_head_classes, config.seed)
    if freeze_prefixes is not None:
        config = replace(config, freeze_prefixes=tuple(freeze_prefixes))
    LOGGER.info(
        "fine-tuning %s with a %d-class head, %d frozen prefixes",
        base.arch,
        new_head_classes,
        len(config.freeze_prefixes),
    )
    return train_model(model, manifest, config, out_dir=out_dir)
