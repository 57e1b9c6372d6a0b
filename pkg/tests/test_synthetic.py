from __future__ import annotations

import logging
from pathlib import Path

import cv2
import numpy as np
import pytest

from detektor.config import SynthConfig
from detektor.errors import OutputExistsError
from detektor.services.dataset import index_dataset, read_split_manifest
from detektor.services.synthetic import synth_generate
from detektor.services.tubelet import import_landmark_file


def _make_cfg(**overrides) -> SynthConfig:
    values = {"n_videos_per_class": 1, "frames_per_video": 5, "image_size": 32}
    values.update(overrides)
    return SynthConfig(**values)


def _frame_files(root: Path) -> list[Path]:
    return sorted(p for label in ("real", "fake") for p in (root / label).rglob("frame_*.png"))


def test_synth_generate_writes_expected_frame_count(tmp_path) -> None:
    root = synth_generate(_make_cfg(), tmp_path / "synth")

    assert len(_frame_files(root)) == 10
    assert sorted(read_split_manifest(root)) == ["fake_0000", "real_0000"]
    landmarks, stats = import_landmark_file(root / "landmarks.jsonl")
    assert stats["imported"] == 10
    assert len(list((root / "masks").rglob("*.png"))) == 10


def test_synth_generate_is_bit_identical_for_same_seed(tmp_path) -> None:
    first = synth_generate(_make_cfg(n_videos_per_class=2), tmp_path / "a")
    second = synth_generate(_make_cfg(n_videos_per_class=2), tmp_path / "b")

    files_a = sorted(p.relative_to(first) for p in first.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(second) for p in second.rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (first / rel).read_bytes() == (second / rel).read_bytes(), rel


def test_synth_generate_differs_with_seed(tmp_path) -> None:
    first = synth_generate(_make_cfg(seed=1), tmp_path / "a")
    second = synth_generate(_make_cfg(seed=2), tmp_path / "b")

    assert _frame_files(first)[0].read_bytes() != _frame_files(second)[0].read_bytes()


def test_synth_generate_refuses_non_empty_target(tmp_path) -> None:
    (tmp_path / "keep.txt").write_text("x", encoding="utf-8")

    with pytest.raises(OutputExistsError):
        synth_generate(_make_cfg(), tmp_path)


def test_generated_tree_indexes_without_warnings(tmp_path, caplog) -> None:
    root = synth_generate(_make_cfg(n_videos_per_class=4), tmp_path / "synth")
    caplog.clear()

    with caplog.at_level(logging.WARNING):
        descriptors = index_dataset(root, 5, 1)

    assert len(descriptors) == 8
    assert not [r for r in caplog.records if r.levelno >= logging.WARNING]
    assert {d.manipulation for d in descriptors if d.label == 1} == {"synthetic"}


def test_single_frames_carry_no_class_signal(tmp_path) -> None:
    root = synth_generate(_make_cfg(n_videos_per_class=60), tmp_path / "synth")

    features, labels = [], []
    for label, name in ((0, "real"), (1, "fake")):
        for path in sorted((root / name).rglob("frame_*.png")):
            image = cv2.imread(str(path), cv2.IMREAD_COLOR).astype(np.float64) / 255.0
            features.append((image.mean(), image.var()))
            labels.append(label)
    features_arr = np.array(features)
    labels_arr = np.array(labels)
    assert len(labels_arr) >= 500

    for column in range(2):
        values = features_arr[:, column]
        predicted = (values >= np.median(values)).astype(int)
        accuracy = float(np.mean(predicted == labels_arr))
        assert 0.40 <= max(accuracy, 1.0 - accuracy) <= 0.60


def test_without_flicker_and_drift_classes_share_frame_histograms(tmp_path) -> None:
    cfg = _make_cfg(n_videos_per_class=25, frames_per_video=4, flicker_amplitude=0.0, drift_rate=0.0)
    root = synth_generate(cfg, tmp_path / "synth")

    histograms = {0: [], 1: []}
    for label, name in ((0, "real"), (1, "fake")):
        for video_dir in sorted((root / name).iterdir()):
            for path in sorted(video_dir.glob("frame_*.png")):
                gray = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
                hist = np.bincount(gray.ravel() // 16, minlength=16).astype(np.float64)
                histograms[label].append((video_dir.name, hist / hist.sum()))

    def mean_distance(a, b) -> float:
        distances = [np.abs(ha - hb).sum() for va, ha in a for vb, hb in b if va != vb]
        return float(np.mean(distances))

    within = 0.5 * (mean_distance(histograms[0], histograms[0]) + mean_distance(histograms[1], histograms[1]))
    between = mean_distance(histograms[0], histograms[1])
    assert between < 2.0 * within
