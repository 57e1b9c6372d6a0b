from __future__ import annotations

from collections import Counter

import numpy as np
import pytest

from detektor.errors import DataLoadError
from detektor.models import SampleDescriptor
from detektor.services.dataset import (
    balance_labels,
    check_split_hygiene,
    count_by_split_and_label,
    frame_path,
    index_dataset,
    load_batch,
    read_split_manifest,
    stratified_splits,
    window_starts,
)
from detektor.storage import read_cached_tubelet
from toy_data import make_cached_descriptors, write_toy_tree


@pytest.mark.parametrize(
    ("num_frames", "T", "stride", "expected"),
    [
        (5, 5, 1, [0]),
        (9, 5, 2, [0, 2, 4]),
        (10, 5, 5, [0, 5]),
        (4, 5, 1, []),
        (3, 1, 1, [0, 1, 2]),
    ],
)
def test_window_starts(num_frames: int, T: int, stride: int, expected: list[int]) -> None:
    assert window_starts(num_frames, T, stride) == expected


def test_index_dataset_toy_tree_gives_balanced_windows(tmp_path) -> None:
    write_toy_tree(
        tmp_path,
        {
            "r1": (0, 10, "train"),
            "r2": (0, 10, "test"),
            "f1": (1, 10, "train"),
            "f2": (1, 10, "test"),
        },
    )

    descriptors = index_dataset(tmp_path, 5, 5)

    assert len(descriptors) == 8
    assert Counter(d.label for d in descriptors) == {0: 4, 1: 4}
    assert {d.frame_indices for d in descriptors} == {(0, 1, 2, 3, 4), (5, 6, 7, 8, 9)}
    assert {d.manipulation for d in descriptors if d.label == 1} == {"deepfake"}
    assert {d.manipulation for d in descriptors if d.label == 0} == {"none"}


def test_index_dataset_skips_short_videos(tmp_path, caplog) -> None:
    write_toy_tree(tmp_path, {"r1": (0, 3, "train"), "f1": (1, 6, "train")})

    descriptors = index_dataset(tmp_path, 5, 1)

    assert [d.video_id for d in descriptors] == ["f1", "f1"]
    assert "r1" in caplog.text


def test_index_dataset_skips_windows_across_missing_frames(tmp_path, caplog) -> None:
    write_toy_tree(tmp_path, {"r1": (0, 10, "train")})
    frame_path(tmp_path, 0, "r1", 3).unlink()

    descriptors = index_dataset(tmp_path, 3, 1)

    windows = [d.frame_indices for d in descriptors]
    assert windows == [(0, 1, 2), (4, 5, 6), (5, 6, 7), (6, 7, 8), (7, 8, 9)]
    assert all(w[-1] - w[0] == 2 for w in windows)
    assert "Lücke" in caplog.text


def test_index_dataset_covers_every_reachable_frame(tmp_path) -> None:
    write_toy_tree(tmp_path, {"r1": (0, 11, "train")})

    descriptors = index_dataset(tmp_path, 3, 2)

    covered = set()
    for d in descriptors:
        covered.update(d.frame_indices)
    assert covered == set(range(11))


def test_index_dataset_filters_by_manipulation(tmp_path) -> None:
    write_toy_tree(tmp_path, {"r1": (0, 5, "train"), "f1": (1, 5, "train")})

    descriptors = index_dataset(tmp_path, 5, 1, manipulation="faceswap")

    assert [d.video_id for d in descriptors] == ["r1"]


def test_index_dataset_requires_manifest(tmp_path) -> None:
    with pytest.raises(DataLoadError):
        index_dataset(tmp_path, 5, 1)


def test_read_split_manifest_rejects_unknown_split(tmp_path) -> None:
    (tmp_path / "splits.json").write_text('{"v1": "holdout"}', encoding="utf-8")

    with pytest.raises(DataLoadError):
        read_split_manifest(tmp_path)


def test_split_hygiene_detects_leaking_video() -> None:
    descriptors = [
        SampleDescriptor(video_id="v1", frame_indices=(0,), label=0, split="train", manipulation="none"),
        SampleDescriptor(video_id="v1", frame_indices=(1,), label=0, split="test", manipulation="none"),
    ]

    with pytest.raises(DataLoadError, match="v1"):
        check_split_hygiene(descriptors)


@pytest.mark.parametrize("n", [3, 5, 20, 200])
def test_stratified_splits_fill_every_split(n: int) -> None:
    ids = [f"video_{i}" for i in range(n)]

    assignment = stratified_splits(ids, (0.72, 0.14, 0.14))

    assert set(assignment) == set(ids)
    assert set(assignment.values()) == {"train", "val", "test"}
    assert assignment == stratified_splits(list(reversed(ids)), (0.72, 0.14, 0.14))


def test_balance_labels_oversamples_minority() -> None:
    descriptors = [
        SampleDescriptor(video_id=f"v{i}", frame_indices=(0,), label=int(i < 2), split="train", manipulation="none")
        for i in range(8)
    ]

    balanced = balance_labels(descriptors, seed=3)

    counts = Counter(d.label for d in balanced)
    assert counts[0] == counts[1] == 6
    assert balance_labels(descriptors, seed=3) == balanced


def test_load_batch_yields_partial_last_batch(tmp_path) -> None:
    descriptors = make_cached_descriptors(tmp_path, 10)

    sizes = [len(batch.sample_ids) for batch in load_batch(descriptors, tmp_path, 4)]

    assert sizes == [4, 4, 2]


def test_load_batch_same_seed_same_order(tmp_path) -> None:
    descriptors = make_cached_descriptors(tmp_path, 10)

    first = [sid for batch in load_batch(descriptors, tmp_path, 3, shuffle_seed=5) for sid in batch.sample_ids]
    second = [sid for batch in load_batch(descriptors, tmp_path, 3, shuffle_seed=5) for sid in batch.sample_ids]
    plain = [sid for batch in load_batch(descriptors, tmp_path, 3) for sid in batch.sample_ids]

    assert first == second
    assert sorted(first) == sorted(plain)
    assert plain == [d.sample_id for d in descriptors]


def test_load_batch_normalises_and_keeps_layout(tmp_path) -> None:
    descriptors = make_cached_descriptors(tmp_path, 2, T=3, size=8)

    batch = next(iter(load_batch(descriptors, tmp_path, 2)))

    raw = read_cached_tubelet(tmp_path, descriptors[0])
    assert tuple(batch.images.shape) == (2, 3, 8, 8, 3)
    np.testing.assert_allclose(batch.images[0].numpy(), (raw - 0.5) / 0.5, atol=1e-6)
    assert batch.labels.tolist() == [0.0, 1.0]


def test_load_batch_reports_missing_cache_entry(tmp_path) -> None:
    descriptors = make_cached_descriptors(tmp_path / "cache", 2)
    missing = SampleDescriptor(video_id="ghost", frame_indices=(0, 1), label=0, split="train", manipulation="none")

    with pytest.raises(DataLoadError, match="ghost"):
        list(load_batch(descriptors + [missing], tmp_path / "cache", 2))


def test_count_by_split_and_label(tmp_path) -> None:
    descriptors = make_cached_descriptors(tmp_path, 6, splits=("train", "val", "test"))

    counts = count_by_split_and_label(descriptors)

    assert counts == {"train": {0: 1, 1: 1}, "val": {0: 1, 1: 1}, "test": {0: 1, 1: 1}}
