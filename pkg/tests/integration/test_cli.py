"""End-to-end runs of the lmc command line."""

from __future__ import annotations

import json

from typing import TYPE_CHECKING

import pytest

from levit_mc.cascade import CASCADE_NAME
from levit_mc.cli import main, run
from levit_mc.data import MANIFEST_NAME, read_manifest
from levit_mc.train import BEST_NAME, LAST_NAME, METRICS_NAME
from levit_mc.version_builder import PKGS
from tests.conftest import TINY_DENSENET_ARGS, TINY_LEVIT_ARGS, TINY_SIZE


if TYPE_CHECKING:
    from pathlib import Path


SYNTH_ARGS = [
    "--families=2",
    "--per-family=3",
    "--benign=3",
    "--min-length=300",
    "--max-length=900",
]


def test_version(
    monkeypatch: pytest.MonkeyPatch,
    capsys: pytest.CaptureFixture[str],
) -> None:
    """Test collecting versions.

    Args:
        monkeypatch: Pytest monkeypatch fixture.
        capsys: Pytest capsys fixture.
    """
    monkeypatch.setattr("sys.argv", ["lmc", "--version"])
    with pytest.raises(SystemExit):
        main()
    captured = capsys.readouterr()
    for pkg in PKGS:
        assert pkg in captured.out, f"{pkg} not found in version output"


def test_convert_directory(tmp_path: Path) -> None:
    """Every non-empty file becomes a PNG in a mirrored tree.

    Args:
        tmp_path: Pytest fixture for temporary directory.
    """
    source = tmp_path / "bins"
    (source / "sub").mkdir(parents=True)
    (source / "a.exe").write_bytes(bytes(range(256)) * 2)
    (source / "sub" / "b.dll").write_bytes(b"MZ\x90\x00" * 10)
    (source / "empty.bin").write_bytes(b"")
    out = tmp_path / "images"
    assert run(["convert", str(source), str(out)]) == 0
    assert (out / "a.png").is_file()
    assert (out / "sub" / "b.png").is_file()
    manifest = read_manifest(out / MANIFEST_NAME)
    assert sorted(record.id for record in manifest.records) == ["a", "sub/b"]
    expected_length = 40
    assert {r.id: r.orig_len for r in manifest.records}["sub/b"] == expected_length


def test_synth_is_deterministic(tmp_path: Path) -> None:
    """Equal seeds write identical corpora.

    Args:
        tmp_path: Pytest fixture for temporary directory.
    """
    for name in ("first", "second"):
        assert run(["dataset", "synth", str(tmp_path / name), "--seed=3", *SYNTH_ARGS]) == 0
    first = (tmp_path / "first" / MANIFEST_NAME).read_text(encoding="utf-8")
    second = (tmp_path / "second" / MANIFEST_NAME).read_text(encoding="utf-8")
    assert first == second
    images = sorted((tmp_path / "first").rglob("*.png"))
    expected_images = 9
    assert len(images) == expected_images
    for image in images:
        twin = tmp_path / "second" / image.relative_to(tmp_path / "first")
        assert image.read_bytes() == twin.read_bytes()


def test_scan_and_split(tmp_path: Path) -> None:
    """A scanned corpus can be split and the split exported.

    Args:
        tmp_path: Pytest fixture for temporary directory.
    """
    root = tmp_path / "corpus"
    assert run(["dataset", "synth", str(root), *SYNTH_ARGS]) == 0
    index = tmp_path / "index.jsonl"
    assert run(["dataset", "scan", str(root), "--output", str(index)]) == 0
    exported = tmp_path / "split.jsonl"
    argv = ["dataset", "split", str(index), "--train-fraction=0.7", "--split-file", str(exported)]
    assert run(argv) == 0
    manifest = read_manifest(index)
    assert manifest.class_counts("train") == [2, 2, 2]
    assert all(manifest.resolve(record).is_file() for record in manifest.records)
    assert manifest.class_counts("val") == [1, 1, 1]
    assert len(exported.read_text(encoding="utf-8").splitlines()) == len(manifest)


def test_cascade_pipeline(
    stage_checkpoints: tuple[Path, Path],
    synth_corpus: Path,
    tmp_path: Path,
) -> None:
    """Assemble a cascade, then classify, evaluate and benchmark with it.

    Args:
        stage_checkpoints: Stage 1 and stage 2 checkpoint files.
        synth_corpus: Manifest of the synthetic corpus.
        tmp_path: Pytest fixture for temporary directory.
    """
    stage1, stage2 = stage_checkpoints
    cascade = tmp_path / "cascade"
    argv = ["cascade", str(cascade), "--stage1", str(stage1), "--stage2", str(stage2)]
    assert run([*argv, "--data", str(synth_corpus)]) == 0
    assert (cascade / CASCADE_NAME).is_file()

    verdicts = tmp_path / "verdicts.jsonl"
    argv = ["classify", "--cascade", str(cascade), "--input", str(synth_corpus)]
    assert run([*argv, "--output", str(verdicts), "--workers=2"]) == 0
    lines = [json.loads(line) for line in verdicts.read_text(encoding="utf-8").splitlines()]
    manifest = read_manifest(synth_corpus)
    assert [line["id"] for line in lines] == [record.id for record in manifest.records]
    assert {line["verdict"] for line in lines} <= {"benign", "malign"}

    report = tmp_path / "report.json"
    argv = ["eval", "--cascade", str(cascade), "--data", str(synth_corpus), "--format", "json"]
    assert run([*argv, "--output", str(report)]) == 0
    document = json.loads(report.read_text(encoding="utf-8"))
    assert sum(map(sum, document["confusion"])) == len(manifest.subset("val"))

    bench = tmp_path / "bench.json"
    argv = ["bench", "--cascade", str(cascade), "--data", str(synth_corpus), "--split", "val"]
    assert run([*argv, "--batch-size=2", "--warmup=1", "--output", str(bench)]) == 0
    bench_document = json.loads(bench.read_text(encoding="utf-8"))
    throughput = bench_document["throughput"]
    expected_ips = 2370
    assert bench_document["references"]["paper_ips"] == expected_ips
    assert document["references"] == bench_document["references"]
    assert throughput["images_per_second"] > 0
    expected_reps = 3
    assert throughput["repetitions"] == expected_reps


def test_classify_raw_executables(
    stage_checkpoints: tuple[Path, Path],
    tmp_path: Path,
    capsys: pytest.CaptureFixture[str],
) -> None:
    """Executables are rendered on the fly and reported by relative path.

    Args:
        stage_checkpoints: Stage 1 and stage 2 checkpoint files.
        tmp_path: Pytest fixture for temporary directory.
        capsys: Pytest capsys fixture.
    """
    stage1, stage2 = stage_checkpoints
    cascade = tmp_path / "cascade"
    assert run(["cascade", str(cascade), "--stage1", str(stage1), "--stage2", str(stage2)]) == 0
    samples = tmp_path / "samples"
    samples.mkdir()
    (samples / "one.exe").write_bytes(bytes(range(200)))
    (samples / "two.exe").write_bytes(b"\xff" * 500)
    capsys.readouterr()
    assert run(["classify", "--cascade", str(cascade), "--input", str(samples)]) == 0
    lines = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert [line["id"] for line in lines] == ["one.exe", "two.exe"]


def test_train_stage1(
    synth_corpus: Path,
    tmp_path: Path,
    capsys: pytest.CaptureFixture[str],
) -> None:
    """One epoch of triage training writes checkpoints, metrics and a summary.

    Args:
        synth_corpus: Manifest of the synthetic corpus.
        tmp_path: Pytest fixture for temporary directory.
        capsys: Pytest capsys fixture.
    """
    out = tmp_path / "stage1"
    argv = ["train", "stage1", "--data", str(synth_corpus), "--out", str(out), "--epochs", "1"]
    capsys.readouterr()
    assert run([*argv, f"--image-size={TINY_SIZE}", "--batch-size=4", *TINY_DENSENET_ARGS]) == 0
    assert (out / LAST_NAME).is_file()
    assert (out / BEST_NAME).is_file()
    assert (out / METRICS_NAME).is_file()
    summary = json.loads(capsys.readouterr().out)
    assert summary["epochs"] == 1
    assert summary["arch"] == "densenet-toy/v1"


@pytest.mark.slow
def test_train_both_stages_and_evaluate(tmp_path: Path) -> None:
    """A scaled-down run of the whole pipeline learns better than chance.

    Args:
        tmp_path: Pytest fixture for temporary directory.
    """
    corpus = tmp_path / "corpus"
    synth = ["--families=3", "--per-family=20", "--benign=20", "--max-length=4096"]
    assert run(["dataset", "synth", str(corpus), "--seed=1", *synth]) == 0
    data = corpus / MANIFEST_NAME
    assert run(["dataset", "split", str(data), "--seed=1"]) == 0
    common = [f"--image-size={TINY_SIZE}", "--batch-size=8", "--epochs", "15", "--lr", "3e-3"]
    for stage, extra in (("stage1", TINY_DENSENET_ARGS), ("stage2", TINY_LEVIT_ARGS)):
        out = tmp_path / stage
        assert run(["train", stage, "--data", str(data), "--out", str(out), *common, *extra]) == 0
    cascade = tmp_path / "cascade"
    argv = [
        "cascade",
        str(cascade),
        "--stage1",
        str(tmp_path / "stage1" / BEST_NAME),
        "--stage2",
        str(tmp_path / "stage2" / BEST_NAME),
        "--data",
        str(data),
    ]
    assert run(argv) == 0
    report = tmp_path / "report.json"
    argv = ["eval", "--cascade", str(cascade), "--data", str(data), "--format", "json"]
    assert run([*argv, "--output", str(report)]) == 0
    document = json.loads(report.read_text(encoding="utf-8"))
    chance = 1 / 4
    assert document["accuracy"] > chance
