"""Global conftest.py for pytest.

The root package import below happens before the pytest workers are forked, so it
picked up by the initial coverage process for a source match.

Without it, coverage reports the following false positive error:

CoverageWarning: No data was collected. (no-data-collected)

This works in conjunction with the coverage source_pkg set to the package such that
a `coverage run --debug trace` shows the source package and file match.

<...>
Imported source package '<package>' as '/**/src/<package>/__init__.py'
<...>
Tracing '/**/src/<package>/__init__.py'
"""

from __future__ import annotations

import re

from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import pytest

import levit_mc  # noqa: F401

from levit_mc.checkpoint import checkpoint_from_model, save_checkpoint
from levit_mc.data import MANIFEST_NAME, SynthSpec, split, synth_generate, write_manifest
from levit_mc.models import Mode
from levit_mc.models.densenet import DenseNetConfig, build_densenet
from levit_mc.models.levit import LeViTConfig, build_levit
from levit_mc.tensor import Tensor


if TYPE_CHECKING:
    from collections.abc import Callable

    from numpy.typing import NDArray

    from levit_mc.models import ModelGraph


FIXTURES_DIR = Path(__file__).parent / "fixtures"

TINY_SIZE = 32
TINY_DENSENET = DenseNetConfig(growth_rate=4, block_layout=(1, 1), init_channels=8)
TINY_LEVIT = LeViTConfig(
    stem_channels=(4, 8, 16),
    stage_dims=(16, 24),
    stage_depths=(1, 1),
    heads=(2, 3),
    key_dim=4,
    mlp_ratio=2,
)
# The same toy layouts as `--section.key=value` overrides.
TINY_DENSENET_ARGS = [
    "--densenet.growth_rate=4",
    "--densenet.block_layout=1,1",
    "--densenet.init_channels=8",
]
TINY_LEVIT_ARGS = [
    "--levit.stem_channels=4,8,16",
    "--levit.stage_dims=16,24",
    "--levit.stage_depths=1,1",
    "--levit.heads=2,3",
    "--levit.key_dim=4",
    "--levit.mlp_ratio=2",
]
TINY_CORPUS = SynthSpec(
    families=2,
    samples_per_family=6,
    benign_samples=6,
    min_length=300,
    max_length=1200,
)


def pytest_addoption(parser: pytest.Parser) -> None:
    """Add options to pytest.

    Args:
        parser: The pytest parser.
    """
    parser.addoption(
        "--include-slow",
        action="store_true",
        default=False,
        help="Include the scaled-down training experiments",
    )


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    """Modify the collection of items.

    Args:
        config: The pytest configuration.
        items: The list of items.
    """
    if config.getoption("--include-slow"):
        return
    skip_slow = pytest.mark.skip(reason="need --include-slow option to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def strip_ansi_escape(data: str | bytes) -> str:
    """Remove all ANSI escapes from string or bytes.

    If bytes is passed instead of string, it will be converted to string
    using UTF-8.

    Args:
        data: Input string or bytes

    Returns:
        String with removed ANSI sequences
    """
    if isinstance(data, bytes):  # pragma: no branch
        data = data.decode("utf-8")

    return re.sub(r"\x1b[^m]*m", "", data)


@dataclass
class StubModel:
    """A classifier whose logits are computed from the mean pixel of each image.

    Attributes:
        num_classes: Width of the logits.
        score: Maps the (N,) mean pixel values to (N, num_classes) logits.
        seen: Images forwarded so far.
    """

    num_classes: int
    score: Callable[[NDArray[np.float64]], NDArray[np.float64]]
    seen: int = field(default=0)

    def forward(self, batch: Tensor, mode: Mode = Mode.EVAL) -> Tensor:  # noqa: ARG002
        """Compute logits.

        Args:
            batch: Images of shape (N, 3, S, S).
            mode: Ignored.

        Returns:
            The logits.
        """
        self.seen += batch.shape[0]
        means = batch.data.astype(np.float64).mean(axis=(1, 2, 3))
        return Tensor(self.score(means), dtype=np.float64)


def brightness_triage() -> StubModel:
    """Two-class stub: images brighter than 0.5 are malign.

    Returns:
        The stub.
    """
    return StubModel(2, lambda m: np.stack([0.5 - m, m - 0.5], axis=1) * 20.0)


def brightness_families() -> StubModel:
    """25-class stub: the family is the mean pixel value binned into 25 steps.

    Returns:
        The stub.
    """

    def score(means: NDArray[np.float64]) -> NDArray[np.float64]:
        centers = (np.arange(25) + 0.5) / 25.0
        return -np.abs(means[:, None] - centers[None, :]) * 100.0

    return StubModel(25, score)


def flat_images(values: list[float], size: int = TINY_SIZE) -> NDArray[np.float32]:
    """Uniform images, one per value.

    Args:
        values: Pixel value of each image.
        size: Image side.

    Returns:
        A (N, 3, size, size) batch.
    """
    return np.stack([np.full((3, size, size), v, dtype=np.float32) for v in values])


@pytest.fixture
def test_fixture_dir(request: pytest.FixtureRequest) -> Path:
    """Provide the fixture directory for a given test.

    Args:
        request: The pytest fixture request.

    Returns:
        Path: The test fixture directory.
    """
    return FIXTURES_DIR / request.path.relative_to(Path(__file__).parent).with_suffix("")


@pytest.fixture
def tiny_densenet() -> ModelGraph:
    """A small seeded triage network.

    Returns:
        The model.
    """
    return build_densenet(TINY_DENSENET, seed=0)


@pytest.fixture
def tiny_levit() -> ModelGraph:
    """A small seeded family network for 32-pixel images.

    Returns:
        The model.
    """
    return build_levit(TINY_LEVIT, seed=0, image_size=TINY_SIZE)


@pytest.fixture(scope="session")
def synth_corpus(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """A split synthetic corpus with two families and a benign class.

    Args:
        tmp_path_factory: Pytest tmp_path_factory fixture.

    Returns:
        Path: The manifest file.
    """
    root = tmp_path_factory.mktemp("corpus")
    manifest = split(synth_generate(TINY_CORPUS, root), 0.5, seed=0)
    write_manifest(manifest, root / MANIFEST_NAME)
    return root / MANIFEST_NAME


@pytest.fixture(scope="session")
def stage_checkpoints(tmp_path_factory: pytest.TempPathFactory) -> tuple[Path, Path]:
    """Untrained triage and family checkpoints for 32-pixel images.

    Args:
        tmp_path_factory: Pytest tmp_path_factory fixture.

    Returns:
        The stage 1 and stage 2 checkpoint files.
    """
    root = tmp_path_factory.mktemp("checkpoints")
    stage1 = root / "stage1.lmck"
    stage2 = root / "stage2.lmck"
    save_checkpoint(checkpoint_from_model(build_densenet(TINY_DENSENET, seed=1)), stage1)
    save_checkpoint(
        checkpoint_from_model(build_levit(TINY_LEVIT, seed=2, image_size=TINY_SIZE)),
        stage2,
    )
    return stage1, stage2
