from __future__ import annotations

import json
from pathlib import Path

import pytest

from detektor.cli import main
from detektor.errors import EXIT_OK

pytestmark = pytest.mark.slow

SEEDS = (1, 2, 3)
CROP_FLAGS = ["--mode", "landmark", "--crop-size", "64"]
TRAIN_FLAGS = [
    "--backbone",
    "tinyconv",
    "--hidden-size",
    "32",
    "--learning-rate",
    "1e-3",
    "--batch-size",
    "16",
    "--epochs",
    "40",
    "--early-stop-patience",
    "8",
]


@pytest.fixture(scope="module")
def benchmark_root(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("bench") / "synth"
    assert main(["synth", "--out", str(root), "--n-videos-per-class", "200", "--synth-seed", "7"], environ={}) == EXIT_OK
    for t in ("5", "1"):
        assert main(["preprocess", "--root", str(root), "--sequence-length", t, *CROP_FLAGS], environ={}) == EXIT_OK
    return root


def _train_and_score(root: Path, work: Path, name: str, seed: int, t: int, bidirectional: bool) -> float:
    run_dir = work / name
    data = ["--root", str(root), "--sequence-length", str(t), *CROP_FLAGS]
    direction = "--bidirectional" if bidirectional else "--no-bidirectional"
    train = ["train", "--run-dir", str(run_dir), *data, *TRAIN_FLAGS, direction, "--seed", str(seed)]
    assert main(train, environ={}) == EXIT_OK

    scores = work / f"{name}.jsonl"
    evaluate = ["eval", "--checkpoint", str(run_dir / "checkpoints" / "best.ckpt"), "--out", str(scores), *data]
    assert main(evaluate, environ={}) == EXIT_OK
    report = json.loads((work / f"{name}.report.json").read_text(encoding="utf-8"))
    return float(report["accuracy"])


@pytest.mark.parametrize("seed", SEEDS)
def test_sequence_beats_single_frame_and_bidirectional_holds_up(benchmark_root, tmp_path, seed: int) -> None:
    bidir = _train_and_score(benchmark_root, tmp_path, "bidir_t5", seed, 5, True)
    unidir = _train_and_score(benchmark_root, tmp_path, "unidir_t5", seed, 5, False)
    single = _train_and_score(benchmark_root, tmp_path, "bidir_t1", seed, 1, True)

    assert bidir >= 0.90, (bidir, unidir, single)
    assert single <= 0.65, (bidir, unidir, single)
    assert bidir >= unidir - 0.02, (bidir, unidir, single)
