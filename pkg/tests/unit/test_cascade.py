"""Tests for the two-stage cascade."""

from __future__ import annotations

import json

from typing import TYPE_CHECKING

import numpy as np
import pytest

from levit_mc.cascade import (
    CASCADE_NAME,
    CascadeModel,
    Verdict,
    VerdictKind,
    load_cascade,
    save_cascade,
)
from levit_mc.data import ClassIndex
from levit_mc.errors import ConfigError, InvalidInput, IoError, ShapeError
from levit_mc.models import densenet, levit
from tests.conftest import (
    TINY_SIZE,
    StubModel,
    brightness_families,
    brightness_triage,
    flat_images,
)


if TYPE_CHECKING:
    from pathlib import Path


def _cascade() -> CascadeModel:
    return CascadeModel(brightness_triage(), brightness_families(), image_size=TINY_SIZE)


def test_family_model_runs_only_for_malign_images() -> None:
    """Stage 2 sees exactly the images at or above the threshold."""
    cascade = _cascade()
    verdicts = cascade.classify_block(flat_images([0.1, 0.3, 0.7, 0.9, 0.55]))
    kinds = [verdict.kind for verdict in verdicts]
    assert kinds == [
        VerdictKind.BENIGN,
        VerdictKind.BENIGN,
        VerdictKind.MALIGN,
        VerdictKind.MALIGN,
        VerdictKind.MALIGN,
    ]
    expected_routed = 3
    assert cascade.stage2_calls == expected_routed
    assert isinstance(cascade.family_model, StubModel)
    assert cascade.family_model.seen == expected_routed
    assert [verdict.family for verdict in verdicts] == [None, None, 17, 22, 13]


def test_threshold_is_inclusive() -> None:
    """A malign probability equal to the threshold goes to stage 2."""
    verdict = _cascade().classify(flat_images([0.5])[0])
    assert verdict.stage1_prob_malign == pytest.approx(0.5)
    assert verdict.kind is VerdictKind.MALIGN
    expected_family = 12
    assert verdict.family == expected_family


def test_benign_confidence() -> None:
    """Benign confidence is the complement of the malign probability."""
    verdict = _cascade().classify(flat_images([0.2])[0])
    assert verdict.family is None
    assert verdict.confidence == pytest.approx(1.0 - verdict.stage1_prob_malign)
    assert verdict.confidence > 0.99


@pytest.mark.parametrize("workers", (1, 4), ids=("sequential", "threaded"))
def test_classify_batch_matches_single_calls(workers: int) -> None:
    """Fan-out keeps the input order and the single-image results.

    Args:
        workers: Worker threads.
    """
    images = list(flat_images([0.05 * i for i in range(20)]))
    expected = [_cascade().classify(image) for image in images]
    cascade = _cascade()
    assert cascade.classify_batch(images, workers=workers) == expected
    malign = sum(verdict.kind is VerdictKind.MALIGN for verdict in expected)
    assert cascade.stage2_calls == malign


@pytest.mark.parametrize("workers", (1, 4), ids=("sequential", "threaded"))
def test_gating_count_over_many_inputs(workers: int) -> None:
    """Stage 2 runs once per image whose malign probability reaches the threshold.

    Args:
        workers: Worker threads.
    """
    values = np.random.default_rng(5).random(1000)
    images = list(flat_images(values.tolist()))
    cascade = _cascade()
    verdicts = cascade.classify_batch(images, workers=workers)
    gated = sum(v.stage1_prob_malign >= cascade.benign_threshold for v in verdicts)
    assert cascade.stage2_calls == gated
    assert isinstance(cascade.family_model, StubModel)
    assert cascade.family_model.seen == gated
    assert [v.family is not None for v in verdicts] == [
        v.stage1_prob_malign >= cascade.benign_threshold for v in verdicts
    ]
    assert 400 < gated < 600


def test_empty_block_and_bad_shapes() -> None:
    """Empty batches yield nothing and foreign image sizes are rejected."""
    cascade = _cascade()
    assert cascade.classify_block(np.zeros((0, 3, TINY_SIZE, TINY_SIZE))) == []
    with pytest.raises(ShapeError):
        cascade.classify_block(np.zeros((1, 3, 8, 8)))


def test_verdict_validation() -> None:
    """Families accompany malign verdicts only, and probabilities stay in range."""
    with pytest.raises(InvalidInput):
        Verdict(VerdictKind.BENIGN, 3, 0.9, 0.1)
    with pytest.raises(InvalidInput):
        Verdict(VerdictKind.MALIGN, None, 0.9, 0.9)
    with pytest.raises(InvalidInput):
        Verdict(VerdictKind.MALIGN, 25, 0.9, 0.9)
    with pytest.raises(InvalidInput):
        Verdict(VerdictKind.BENIGN, None, 0.0, 1.0)


def test_verdict_json() -> None:
    """JSON lines name the family."""
    index = ClassIndex.malevis()
    malign = json.loads(Verdict(VerdictKind.MALIGN, 0, 0.75, 0.875).to_json("a.exe", index))
    assert malign == {
        "id": "a.exe",
        "verdict": "malign",
        "family": "Adposhel",
        "confidence": 0.75,
        "p_malign": 0.875,
    }
    benign = Verdict(VerdictKind.BENIGN, None, 0.75, 0.25).to_dict("b.exe", index)
    assert benign["family"] is None


def test_construction_checks() -> None:
    """Head widths, the threshold and the class table are validated."""
    with pytest.raises(ConfigError):
        CascadeModel(StubModel(3, lambda m: m), brightness_families())
    with pytest.raises(ConfigError):
        CascadeModel(brightness_triage(), StubModel(24, lambda m: m))
    for threshold in (0.0, 1.0):
        with pytest.raises(ConfigError):
            CascadeModel(brightness_triage(), brightness_families(), threshold)
    with pytest.raises(ConfigError):
        CascadeModel(
            brightness_triage(),
            brightness_families(),
            class_index=ClassIndex.from_names(["Agent", "Other"]),
        )


def test_cascade_directory(stage_checkpoints: tuple[Path, Path], tmp_path: Path) -> None:
    """A saved cascade loads with its checkpoints, table and threshold.

    Args:
        stage_checkpoints: Stage 1 and stage 2 checkpoint files.
        tmp_path: Pytest fixture for temporary directory.
    """
    stage1, stage2 = stage_checkpoints
    index = ClassIndex.from_names(["Adposhel", "Agent", "Other"])
    expected_threshold = 0.7
    save_cascade(
        tmp_path,
        stage1,
        stage2,
        class_index=index,
        benign_threshold=expected_threshold,
        image_size=TINY_SIZE,
    )
    assert (tmp_path / CASCADE_NAME).is_file()
    cascade = load_cascade(tmp_path)
    assert cascade.benign_threshold == pytest.approx(expected_threshold)
    assert cascade.class_index == index.padded()
    assert cascade.binary_model.arch == densenet.ARCH
    assert cascade.family_model.arch == levit.ARCH
    verdict = cascade.classify(flat_images([0.4])[0])
    assert 0.0 <= verdict.stage1_prob_malign <= 1.0


def test_load_cascade_errors(tmp_path: Path) -> None:
    """Missing and malformed descriptions are reported.

    Args:
        tmp_path: Pytest fixture for temporary directory.
    """
    with pytest.raises(IoError):
        load_cascade(tmp_path)
    (tmp_path / CASCADE_NAME).write_text("- just\n- a list\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_cascade(tmp_path)
