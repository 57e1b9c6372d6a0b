from __future__ import annotations

import json

import numpy as np
import pytest

from detektor.errors import UndefinedMetricError
from detektor.models import EvalReport, ScoreEntry, ScoreMetadata, ScoreSet
from detektor.services.evaluation import (
    accuracy,
    aggregate_by_video,
    build_report,
    cells_from_reports,
    column_key,
    format_percent,
    legend_label,
    metadata_path,
    pr_ap,
    read_scores,
    report_table,
    reports_from_score_files,
    roc_auc,
    write_report,
    write_scores,
)


def _make_scores(scores, labels, **metadata) -> ScoreSet:
    entries = [ScoreEntry(sample_id=f"v{i}__{0:06d}_5", score=float(s), label=int(l)) for i, (s, l) in enumerate(zip(scores, labels))]
    return ScoreSet(entries=entries, metadata=ScoreMetadata(**metadata))


def _random_scores(rng: np.random.Generator, *, ties: bool) -> ScoreSet:
    n = int(rng.integers(10, 501))
    labels = rng.integers(0, 2, size=n)
    labels[:2] = (0, 1)
    scores = rng.uniform(0.0, 1.0, size=n)
    if ties:
        scores = np.round(scores, 1)
    return _make_scores(scores, labels)


def _pairwise_auc(scores: ScoreSet) -> float:
    pos = scores.scores[scores.labels == 1]
    neg = scores.scores[scores.labels == 0]
    greater = (pos[:, None] > neg[None, :]).sum()
    equal = (pos[:, None] == neg[None, :]).sum()
    return float((greater + 0.5 * equal) / (len(pos) * len(neg)))


def _slow_average_precision(scores: ScoreSet) -> float:
    s, y = scores.scores, scores.labels
    n_pos = int((y == 1).sum())
    total, last_recall = 0.0, 0.0
    for threshold in sorted(set(s.tolist()), reverse=True):
        predicted = s >= threshold
        tp = int((predicted & (y == 1)).sum())
        fp = int((predicted & (y == 0)).sum())
        recall = tp / n_pos
        total += (recall - last_recall) * (tp / (tp + fp))
        last_recall = recall
    return total


def test_accuracy_hand_counted_example() -> None:
    scores = _make_scores([0.9, 0.2, 0.6, 0.4], [1, 0, 0, 1])

    assert accuracy(scores, 0.5) == 0.5


def test_accuracy_perfect() -> None:
    assert accuracy(_make_scores([1.0, 1.0, 1.0], [1, 1, 1])) == 1.0


def test_accuracy_unchanged_by_label_flip() -> None:
    rng = np.random.default_rng(0)
    raw = rng.uniform(0.0, 1.0, size=50)
    raw[np.isclose(raw, 0.5)] = 0.3
    labels = rng.integers(0, 2, size=50)

    original = accuracy(_make_scores(raw, labels))
    flipped = accuracy(_make_scores(1.0 - raw, 1 - labels))

    assert original == flipped


def test_roc_auc_perfect_separation() -> None:
    points, auc_value = roc_auc(_make_scores([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]))

    assert auc_value == 1.0
    assert points[0] == (0.0, 0.0)
    assert points[-1] == (1.0, 1.0)


def test_roc_auc_all_ties_is_one_half() -> None:
    _, auc_value = roc_auc(_make_scores([0.4] * 6, [0, 1, 0, 1, 1, 0]))

    assert auc_value == 0.5


def test_roc_auc_requires_both_classes() -> None:
    with pytest.raises(UndefinedMetricError):
        roc_auc(_make_scores([0.1, 0.7], [1, 1]))


@pytest.mark.parametrize("ties", [False, True])
def test_roc_auc_matches_pairwise_oracle(ties: bool) -> None:
    rng = np.random.default_rng(42 if ties else 7)
    for _ in range(100):
        scores = _random_scores(rng, ties=ties)

        _, auc_value = roc_auc(scores)

        assert abs(auc_value - _pairwise_auc(scores)) < 1e-12


def test_roc_auc_invariant_under_monotone_transform() -> None:
    rng = np.random.default_rng(3)
    scores = _random_scores(rng, ties=True)
    transformed = _make_scores(scores.scores ** 3, scores.labels)

    assert roc_auc(transformed)[1] == roc_auc(scores)[1]


def test_roc_points_are_monotone() -> None:
    points, _ = roc_auc(_random_scores(np.random.default_rng(9), ties=True))

    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    assert xs == sorted(xs)
    assert ys == sorted(ys)


def test_pr_ap_perfect_ranking() -> None:
    _, ap = pr_ap(_make_scores([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]))

    assert ap == 1.0


def test_pr_ap_single_positive_ranked_last() -> None:
    _, ap = pr_ap(_make_scores([0.9, 0.8, 0.7, 0.1], [0, 0, 0, 1]))

    assert ap == pytest.approx(0.25, abs=1e-15)


def test_pr_ap_requires_positive() -> None:
    with pytest.raises(UndefinedMetricError):
        pr_ap(_make_scores([0.1, 0.7], [0, 0]))


def test_pr_ap_matches_slow_implementation() -> None:
    rng = np.random.default_rng(11)
    for index in range(100):
        scores = _random_scores(rng, ties=index % 2 == 0)

        points, ap = pr_ap(scores)

        assert abs(ap - _slow_average_precision(scores)) < 1e-12
        recalls = [p[0] for p in points]
        assert recalls == sorted(recalls)


@pytest.mark.parametrize(
    ("value", "expected"),
    [(0.969, "96.9"), (0.9435, "94.35"), (0.9346, "93.46"), (1.0, "100"), (0.5, "50"), (0.0, "0")],
)
def test_format_percent(value: float, expected: str) -> None:
    assert format_percent(value) == expected


def test_report_table_single_cell() -> None:
    table = report_table({("deepfake", 5, "densenet121+align+bidir"): 0.969})

    lines = table.splitlines()
    assert lines[0].startswith("Manipulation | Frames | Baseline")
    assert "DenseNet + Alignment + BiDir" in lines[0]
    row = [c.strip() for c in lines[2].split("|")]
    assert row == ["Deepfake", "5", "-", "-", "-", "-", "-", "-", "96.9"]


def test_report_table_empty_is_header_only() -> None:
    lines = report_table({}).splitlines()

    assert len(lines) == 2
    assert lines[0].startswith("Manipulation")
    assert set(lines[1]) <= {"-", "+"}


def test_report_table_variant_layout() -> None:
    cells = {("all", 5, "base"): 0.9, ("all", 5, "stn"): 0.85}

    lines = report_table(cells, "variants").splitlines()

    header = [c.strip() for c in lines[0].split("|")]
    assert header == ["Manipulation", "Frames", "Base", "STN", "Multi-Recurrence"]
    row = [c.strip() for c in lines[2].split("|")]
    assert row == ["All", "5", "90", "85", "-"]


@pytest.mark.parametrize(
    ("description", "expected"),
    [
        ("densenet121 5f landmark bidir", "densenet121+align+bidir"),
        ("resnet50 5f mask unidir", "resnet50"),
        ("resnet50 5f landmark unidir", "resnet50+align"),
        ("", "baseline"),
    ],
)
def test_column_key_main_layout(description: str, expected: str) -> None:
    assert column_key(ScoreMetadata(description=description)) == expected


def test_aggregate_by_video_averages_windows() -> None:
    entries = [
        ScoreEntry(sample_id="a__000000_5", score=0.2, label=0),
        ScoreEntry(sample_id="a__000005_5", score=0.4, label=0),
        ScoreEntry(sample_id="b__000000_5", score=0.9, label=1),
    ]

    videos = aggregate_by_video(ScoreSet(entries=entries))

    assert [(e.sample_id, e.label) for e in videos.entries] == [("a", 0), ("b", 1)]
    assert videos.entries[0].score == pytest.approx(0.3)
    assert videos.metadata.aggregation == "video"


def test_scores_and_report_files_roundtrip(tmp_path) -> None:
    scores = _make_scores([0.1, 0.8, 0.3, 0.7], [0, 1, 0, 1], manipulation="synthetic", description="tinyconv 5f landmark bidir", frames=5)

    path = write_scores(tmp_path / "scores.jsonl", scores)
    report = build_report(read_scores(path))
    write_report(tmp_path / "report.json", report)

    assert metadata_path(path).name == "scores.meta.json"
    assert len(path.read_text(encoding="utf-8").splitlines()) == 4
    assert EvalReport.from_dict(json.loads((tmp_path / "report.json").read_text(encoding="utf-8"))) == report
    assert report.metadata.description == "tinyconv 5f landmark bidir"
    assert legend_label(report, "roc_linear") == "tinyconv 5f landmark bidir (AUC = 1.000)"
    assert legend_label(report, "pr") == "tinyconv 5f landmark bidir (AP = 1.000)"


def test_reports_from_score_files_fill_table_cells(tmp_path) -> None:
    write_scores(
        tmp_path / "a.jsonl",
        _make_scores([0.1, 0.8, 0.6, 0.7], [0, 1, 0, 1], manipulation="deepfake", description="densenet121 5f landmark bidir", frames=5),
    )

    reports = reports_from_score_files([tmp_path / "a.jsonl"])
    cells = cells_from_reports(reports)

    assert cells == {("deepfake", 5, "densenet121+align+bidir"): 0.75}
