"""Tests for the optimizer, the scheduler and the training loop."""

from __future__ import annotations

import csv
import math

from dataclasses import replace
from typing import TYPE_CHECKING

import numpy as np
import pytest

from hypothesis import given
from hypothesis import strategies as st

from levit_mc.checkpoint import checkpoint_from_model, load_checkpoint, model_from_checkpoint
from levit_mc.data import binary_view, family_view, read_manifest
from levit_mc.errors import ConfigError, EmptyDataset, InvalidInput
from levit_mc.models import HEAD_PREFIX, levit
from levit_mc.models.densenet import build_densenet
from levit_mc.tensor import Tensor
from levit_mc.train import (
    BEST_NAME,
    LAST_NAME,
    METRICS_NAME,
    AdamState,
    PlateauState,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    fine_tune,
    head_only_prefixes,
    is_frozen,
    plateau_step,
    train_model,
)
from tests.conftest import TINY_DENSENET, TINY_SIZE


if TYPE_CHECKING:
    from pathlib import Path

    from levit_mc.models import ModelGraph


TINY_RUN = TrainConfig(batch_size=4, lr0=1e-3, max_epochs=2, image_size=TINY_SIZE)


def test_plateau_decay_after_patience() -> None:
    """The eleventh epoch without improvement divides the rate by ten."""
    state = plateau_step(PlateauState(lr=1e-5), 0.5)
    for _ in range(10):
        state = plateau_step(state, 0.5)
    assert state.lr == pytest.approx(1e-5)
    expected_counter = 10
    assert state.counter == expected_counter
    state = plateau_step(state, 0.5)
    assert state.lr == pytest.approx(1e-6)
    assert state.counter == 0
    assert state.decays == 1


def test_plateau_improvement_needs_min_delta() -> None:
    """Gains up to min_delta do not reset the counter."""
    state = plateau_step(PlateauState(lr=1.0, min_delta=0.01), 0.5)
    assert plateau_step(state, 0.505).counter == 1
    improved = plateau_step(state, 0.52)
    assert improved.counter == 0
    assert improved.best == pytest.approx(0.52)
    with pytest.raises(InvalidInput):
        plateau_step(state, math.nan)


@given(st.lists(st.floats(min_value=0.0, max_value=1.0), max_size=40))
def test_plateau_rate_never_grows(metrics: list[float]) -> None:
    """The rate only moves down, one factor at a time.

    Args:
        metrics: A sequence of validation accuracies.
    """
    state = PlateauState(lr=1e-5)
    for metric in metrics:
        following = plateau_step(state, metric)
        assert following.lr in (state.lr, pytest.approx(state.lr * state.factor))
        state = following
    assert state.lr == pytest.approx(1e-5 * 0.1**state.decays)


def test_adam_first_step_moves_by_the_rate() -> None:
    """Bias correction makes the first update lr * sign(gradient)."""
    params = {"x": Tensor(np.array([3.0, -2.0]), dtype=np.float64)}
    state = AdamState.fresh(params)
    adam_step(params, {"x": 2.0 * params["x"].data}, state, lr=0.1)
    np.testing.assert_allclose(params["x"].data, [2.9, -1.9])
    assert state.step == 1


def test_adam_minimizes_a_quadratic() -> None:
    """Repeated updates approach the minimum of x**2."""
    params = {"x": Tensor(np.array([3.0]), dtype=np.float64)}
    state = AdamState.fresh(params)
    for _ in range(400):
        adam_step(params, {"x": 2.0 * params["x"].data}, state, lr=0.05)
    assert abs(params["x"].data[0]) < 0.1


def test_frozen_parameters_stay_fixed() -> None:
    """Frozen parameters keep their values and zero moments."""
    params = {
        "stem.conv.weight": Tensor(np.ones(3)),
        f"{HEAD_PREFIX}.bias": Tensor(np.ones(2)),
    }
    state = AdamState.fresh(params, freeze_prefixes=("stem.",))
    grads = {name: np.ones(tensor.shape) for name, tensor in params.items()}
    adam_step(params, grads, state, lr=0.5)
    np.testing.assert_array_equal(params["stem.conv.weight"].data, np.ones(3))
    np.testing.assert_array_equal(state.first["stem.conv.weight"], np.zeros(3))
    np.testing.assert_allclose(params[f"{HEAD_PREFIX}.bias"].data, [0.5, 0.5])
    assert is_frozen("stem.conv.weight", ("stem.",))
    assert not is_frozen("head.fc.bias", ("stem.",))


def test_adam_snapshot_restore() -> None:
    """A restored state continues exactly like the original."""
    params = {"w": Tensor(np.array([1.0, 2.0]))}
    state = AdamState.fresh(params)
    adam_step(params, {"w": np.array([0.3, -0.1])}, state, lr=0.01)
    restored = AdamState.from_snapshot(state.snapshot(), params)
    twin = {"w": Tensor(params["w"].data.copy())}
    grads = {"w": np.array([0.2, 0.4])}
    adam_step(params, grads, state, lr=0.01)
    adam_step(twin, grads, restored, lr=0.01)
    np.testing.assert_array_equal(params["w"].data, twin["w"].data)
    with pytest.raises(ConfigError):
        AdamState.from_snapshot(state.snapshot(), {"v": Tensor(np.ones(2))})


def test_train_config_validation() -> None:
    """Out-of-range settings are rejected and unknown keys ignored."""
    with pytest.raises(ConfigError):
        TrainConfig(lr0=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(plateau_factor=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    config = TrainConfig.from_dict({"batch_size": 8, "freeze_prefixes": ["stem"], "nope": 1})
    assert config.freeze_prefixes == ("stem",)
    assert TrainConfig.from_dict(config.to_dict()) == config


def test_train_writes_checkpoints_and_metrics(
    tiny_densenet: ModelGraph,
    synth_corpus: Path,
    tmp_path: Path,
) -> None:
    """Every epoch logs a train and a val row and refreshes the checkpoints.

    Args:
        tiny_densenet: A small triage network.
        synth_corpus: Manifest of the synthetic corpus.
        tmp_path: Pytest fixture for temporary directory.
    """
    manifest = binary_view(read_manifest(synth_corpus))
    seen: list[int] = []
    result = train_model(
        tiny_densenet,
        manifest,
        TINY_RUN,
        out_dir=tmp_path,
        on_epoch=lambda checkpoint: seen.append(checkpoint.epoch),
    )
    assert seen == [1, 2]
    assert result.last.epoch == TINY_RUN.max_epochs
    assert [row["split"] for row in result.history] == ["train", "val", "train", "val"]
    assert all(math.isfinite(row["loss"]) for row in result.history)
    assert (tmp_path / LAST_NAME).is_file()
    assert (tmp_path / BEST_NAME).is_file()
    with (tmp_path / METRICS_NAME).open(encoding="utf-8") as stream:
        rows = list(csv.DictReader(stream))
    assert list(rows[0]) == ["epoch", "split", "loss", "accuracy", "lr"]
    expected_rows = 4
    assert len(rows) == expected_rows
    assert float(rows[0]["lr"]) == pytest.approx(TINY_RUN.lr0)


def test_resume_continues_the_epoch_count(
    tiny_densenet: ModelGraph,
    synth_corpus: Path,
    tmp_path: Path,
) -> None:
    """A resumed run picks up after the checkpointed epoch.

    Args:
        tiny_densenet: A small triage network.
        synth_corpus: Manifest of the synthetic corpus.
        tmp_path: Pytest fixture for temporary directory.
    """
    manifest = binary_view(read_manifest(synth_corpus))
    train_model(tiny_densenet, manifest, replace(TINY_RUN, max_epochs=1), out_dir=tmp_path)
    checkpoint = load_checkpoint(tmp_path / LAST_NAME)
    assert checkpoint.epoch == 1
    assert checkpoint.optimizer is not None
    assert "plateau" in checkpoint.train_state
    model = model_from_checkpoint(checkpoint)
    result = train_model(model, manifest, TINY_RUN, resume=checkpoint, out_dir=tmp_path)
    assert result.last.epoch == TINY_RUN.max_epochs
    assert [row["epoch"] for row in result.history] == [1, 1, 2, 2]
    lines = (tmp_path / METRICS_NAME).read_text(encoding="utf-8").splitlines()
    expected_lines = 5
    assert len(lines) == expected_lines


def test_resumed_run_matches_an_uninterrupted_run(synth_corpus: Path, tmp_path: Path) -> None:
    """Stopping after one epoch and resuming gives the same model and log.

    Args:
        synth_corpus: Manifest of the synthetic corpus.
        tmp_path: Pytest fixture for temporary directory.
    """
    manifest = binary_view(read_manifest(synth_corpus))
    straight = train_model(build_densenet(TINY_DENSENET, seed=0), manifest, TINY_RUN)

    first = replace(TINY_RUN, max_epochs=1)
    train_model(build_densenet(TINY_DENSENET, seed=0), manifest, first, out_dir=tmp_path)
    checkpoint = load_checkpoint(tmp_path / LAST_NAME)
    model = model_from_checkpoint(checkpoint)
    resumed = train_model(model, manifest, TINY_RUN, resume=checkpoint)

    assert resumed.history == straight.history
    assert resumed.last.params.keys() == straight.last.params.keys()
    for name, values in straight.last.params.items():
        np.testing.assert_array_equal(resumed.last.params[name], values, err_msg=name)
    for name, values in straight.last.buffers.items():
        np.testing.assert_array_equal(resumed.last.buffers[name], values, err_msg=name)


def test_resume_rejects_other_architectures(
    tiny_densenet: ModelGraph,
    tiny_levit: ModelGraph,
    synth_corpus: Path,
) -> None:
    """A checkpoint only resumes its own architecture.

    Args:
        tiny_densenet: A small triage network.
        tiny_levit: A small family network.
        synth_corpus: Manifest of the synthetic corpus.
    """
    manifest = binary_view(read_manifest(synth_corpus))
    with pytest.raises(ConfigError):
        train_model(tiny_densenet, manifest, TINY_RUN, resume=checkpoint_from_model(tiny_levit))


def test_fine_tune_head_only(tiny_levit: ModelGraph, synth_corpus: Path) -> None:
    """Freezing everything but the head leaves the backbone untouched.

    Args:
        tiny_levit: A small family network.
        synth_corpus: Manifest of the synthetic corpus.
    """
    manifest = family_view(read_manifest(synth_corpus))
    base = checkpoint_from_model(tiny_levit)
    result = fine_tune(
        base,
        manifest,
        replace(TINY_RUN, max_epochs=1),
        new_head_classes=2,
        freeze_prefixes=head_only_prefixes(tiny_levit),
        target_arch=levit.ARCH,
    )
    tuned = result.last.params
    assert tuned[f"{HEAD_PREFIX}.weight"].shape[-1] == 2
    for name, array in base.params.items():
        if not name.startswith(HEAD_PREFIX):
            np.testing.assert_array_equal(tuned[name], array)
    with pytest.raises(ConfigError):
        fine_tune(base, manifest, TINY_RUN, new_head_classes=2, target_arch="densenet-toy/v1")


def test_labels_must_fit_the_head(tiny_densenet: ModelGraph, synth_corpus: Path) -> None:
    """Three classes do not fit a binary head.

    Args:
        tiny_densenet: A small triage network.
        synth_corpus: Manifest of the synthetic corpus.
    """
    with pytest.raises(ConfigError):
        train_model(tiny_densenet, read_manifest(synth_corpus), TINY_RUN)


def test_empty_train_split(tiny_densenet: ModelGraph, synth_corpus: Path) -> None:
    """Training needs train records.

    Args:
        tiny_densenet: A small triage network.
        synth_corpus: Manifest of the synthetic corpus.
    """
    manifest = binary_view(read_manifest(synth_corpus))
    val_only = manifest.relabel(manifest.subset("val"), manifest.class_index)
    with pytest.raises(EmptyDataset):
        train_model(tiny_densenet, val_only, TINY_RUN)


def test_divergence_keeps_the_last_good_checkpoint(
    tiny_densenet: ModelGraph,
    synth_corpus: Path,
) -> None:
    """A non-finite update stops training and reports the last completed epoch.

    Args:
        tiny_densenet: A small triage network.
        synth_corpus: Manifest of the synthetic corpus.
    """
    manifest = binary_view(read_manifest(synth_corpus))
    with pytest.raises(TrainingDiverged) as exc_info:
        train_model(tiny_densenet, manifest, replace(TINY_RUN, lr0=math.inf))
    assert exc_info.value.last_good.epoch == 0
    assert all(np.isfinite(a).all() for a in exc_info.value.last_good.params.values())
