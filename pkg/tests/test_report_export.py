from __future__ import annotations

import xml.etree.ElementTree as ET

import pytest

from detektor.errors import InvalidInputError
from detektor.models import ScoreEntry, ScoreMetadata, ScoreSet
from detektor.services.evaluation import build_report, legend_label
from detektor.services.report_export import axis_range, build_plot, emit_plots, generate_table_pdf


def _make_report(manipulation: str = "deepfake", description: str = "densenet121 5f landmark bidir"):
    scores = [0.05, 0.2, 0.35, 0.6, 0.4, 0.7, 0.8, 0.95]
    labels = [0, 0, 0, 0, 1, 1, 1, 1]
    entries = [ScoreEntry(sample_id=f"v{i}", score=s, label=l) for i, (s, l) in enumerate(zip(scores, labels))]
    metadata = ScoreMetadata(manipulation=manipulation, description=description, frames=5)
    return build_report(ScoreSet(entries=entries, metadata=metadata))


def test_emit_plots_writes_parseable_svg(tmp_path) -> None:
    report = _make_report()

    written = emit_plots([report], tmp_path, "roc_linear")

    assert [p.name for p in written] == ["roc_linear_deepfake.svg"]
    text = written[0].read_text(encoding="utf-8")
    assert text
    root = ET.fromstring(written[0].read_bytes())
    assert root.tag.endswith("svg")
    assert legend_label(report, "roc_linear") in text
    assert f"AUC = {report.auc:.3f}" in text


def test_emit_plots_pr_legend_shows_average_precision(tmp_path) -> None:
    report = _make_report()

    written = emit_plots([report], tmp_path, "pr")

    assert f"AP = {report.average_precision:.3f}" in written[0].read_text(encoding="utf-8")


def test_linlog_axis_starts_at_one_in_a_thousand(tmp_path) -> None:
    assert axis_range("roc_linlog") == (1e-3, 1.0)
    assert axis_range("roc_linear") == (0.0, 1.0)

    written = emit_plots([_make_report()], tmp_path, "roc_linlog")

    text = written[0].read_text(encoding="utf-8")
    assert ">0.001<" in text
    assert ">0.0001<" not in text


@pytest.mark.parametrize("mode", ["roc_linear", "roc_linlog", "pr"])
def test_build_plot_axes_follow_mode(mode: str) -> None:
    report = _make_report()

    fig = build_plot([report], mode, "Deepfakes")

    ax = fig.axes[0]
    assert ax.get_xscale() == ("log" if mode == "roc_linlog" else "linear")
    assert ax.get_xlim() == pytest.approx(axis_range(mode))
    assert ax.get_ylim() == pytest.approx((0.0, 1.0))
    assert [t.get_text() for t in ax.get_legend().get_texts()] == [legend_label(report, mode)]


def test_linlog_plot_keeps_curve_inside_axis() -> None:
    fig = build_plot([_make_report()], "roc_linlog", "Deepfakes", min_fpr=1e-2)

    curve = fig.axes[0].get_lines()[-1]
    assert min(curve.get_xdata()) >= 1e-2


def test_emit_plots_one_file_per_manipulation(tmp_path) -> None:
    reports = [_make_report("faceswap"), _make_report("deepfake"), _make_report("deepfake", "resnet50 5f mask unidir")]

    written = emit_plots(reports, tmp_path, "roc_linear")

    assert sorted(p.name for p in written) == ["roc_linear_deepfake.svg", "roc_linear_faceswap.svg"]


def test_emit_plots_is_byte_identical_on_rerun(tmp_path) -> None:
    reports = [_make_report(), _make_report("deepfake", "resnet50 5f mask unidir")]

    first = emit_plots(reports, tmp_path / "a", "roc_linlog")
    second = emit_plots(list(reversed(reports)), tmp_path / "b", "roc_linlog")

    assert first[0].read_bytes() == second[0].read_bytes()


def test_emit_plots_rejects_unknown_mode(tmp_path) -> None:
    with pytest.raises(InvalidInputError):
        emit_plots([_make_report()], tmp_path, "det")


def test_emit_plots_requires_report(tmp_path) -> None:
    with pytest.raises(InvalidInputError):
        emit_plots([], tmp_path, "pr")


def test_generate_table_pdf_returns_pdf_bytes() -> None:
    pdf = generate_table_pdf({("deepfake", 5, "densenet121+align+bidir"): 0.969})

    assert pdf.startswith(b"%PDF")
