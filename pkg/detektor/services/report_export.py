from __future__ import annotations

import logging
from io import BytesIO, StringIO
from pathlib import Path
from typing import List, Mapping, Sequence, Tuple, Union

import matplotlib
import numpy as np
from matplotlib.figure import Figure
from matplotlib.ticker import FixedLocator, NullFormatter, NullLocator
from reportlab.lib import colors
from reportlab.lib.pagesizes import A4, landscape
from reportlab.lib.styles import getSampleStyleSheet
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

from ..errors import InvalidInputError
from ..models import EvalReport
from .evaluation import CellKey, MANIPULATION_LABELS, group_by_manipulation, legend_label, table_grid

logger = logging.getLogger(__name__)

PLOT_MODES = ("roc_linear", "roc_linlog", "pr")
DEFAULT_MIN_FPR = 1e-3

# Text bleibt Text, IDs und Metadaten fest: gleiche Reports ergeben byte-gleiche SVGs
_SVG_RC = {
    "svg.fonttype": "none",
    "svg.hashsalt": "detektor",
    "font.family": "DejaVu Sans",
    "font.size": 8,
}
_SVG_METADATA = {"Date": None, "Creator": "detektor"}
_FIGSIZE = (5.5, 4.8)

PathLike = Union[str, Path]


def axis_range(mode: str, min_fpr: float = DEFAULT_MIN_FPR) -> Tuple[float, float]:
    """Sichtbarer Bereich der x-Achse in Datenkoordinaten."""
    if mode == "roc_linlog":
        return min_fpr, 1.0
    return 0.0, 1.0


def _axis_titles(mode: str) -> Tuple[str, str]:
    if mode == "pr":
        return "Recall", "Precision"
    return "False Positive Rate", "True Positive Rate"


def _curve_points(report: EvalReport, mode: str) -> np.ndarray:
    return np.asarray(report.pr_points if mode == "pr" else report.roc_points, dtype=np.float64).reshape(-1, 2)


def _log_ticks(lo: float) -> List[float]:
    start = int(np.floor(np.log10(lo)))
    return [10.0 ** e for e in range(start, 1)]


def build_plot(reports: Sequence[EvalReport], mode: str, title: str, min_fpr: float = DEFAULT_MIN_FPR) -> Figure:
    if mode not in PLOT_MODES:
        raise InvalidInputError(f"Unbekannter Plot-Modus: {mode!r}")
    fig = Figure(figsize=_FIGSIZE)
    ax = fig.add_subplot(1, 1, 1)
    lo, hi = axis_range(mode, min_fpr)

    if mode == "roc_linlog":
        ax.set_xscale("log")
        ticks = _log_ticks(lo)
        ax.xaxis.set_major_locator(FixedLocator(ticks))
        ax.set_xticklabels([f"{t:g}" for t in ticks])
        ax.xaxis.set_minor_locator(NullLocator())
        ax.xaxis.set_minor_formatter(NullFormatter())
        chance = np.geomspace(lo, hi, 41)
        ax.plot(chance, chance, color="grey", linestyle="--", linewidth=0.6)
    elif mode == "roc_linear":
        ax.plot([0.0, 1.0], [0.0, 1.0], color="grey", linestyle="--", linewidth=0.6)

    for report in reports:
        points = _curve_points(report, mode)
        if mode == "roc_linlog":
            # FPR 0 liegt links außerhalb der log-Achse
            points[:, 0] = np.maximum(points[:, 0], lo)
        ax.plot(points[:, 0], points[:, 1], linewidth=1.4, label=legend_label(report, mode))

    x_title, y_title = _axis_titles(mode)
    ax.set_xlim(lo, hi)
    ax.set_ylim(0.0, 1.0)
    ax.set_xlabel(x_title)
    ax.set_ylabel(y_title)
    ax.set_title(title, fontweight="bold")
    ax.grid(True, linewidth=0.3, alpha=0.5)
    ax.legend(loc="lower right", fontsize=7, frameon=False)
    fig.tight_layout()
    return fig


def render_svg(fig: Figure) -> str:
    buffer = StringIO()
    fig.savefig(buffer, format="svg", metadata=_SVG_METADATA)
    return buffer.getvalue()


def _plot_title(manipulation: str, mode: str) -> str:
    name = MANIPULATION_LABELS.get(manipulation, manipulation)
    if mode == "pr":
        return f"{name}: Precision/Recall"
    if mode == "roc_linlog":
        return f"{name}: ROC (linear-log)"
    return f"{name}: ROC"


def emit_plots(
    reports: Sequence[EvalReport],
    out: PathLike,
    mode: str,
    *,
    min_fpr: float = DEFAULT_MIN_FPR,
) -> List[Path]:
    """Eine SVG-Datei pro Manipulationstyp; gleiche Reports ergeben byte-gleiche Dateien."""
    if not reports:
        raise InvalidInputError("Mindestens ein Report wird für einen Plot benötigt.")
    if mode not in PLOT_MODES:
        raise InvalidInputError(f"Unbekannter Plot-Modus: {mode!r}")
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    for manipulation, group in group_by_manipulation(reports).items():
        ordered = sorted(group, key=lambda r: legend_label(r, mode))
        with matplotlib.rc_context(_SVG_RC):
            fig = build_plot(ordered, mode, _plot_title(manipulation, mode), min_fpr)
            svg = render_svg(fig)
        target = out_dir / f"{mode}_{manipulation}.svg"
        target.write_text(svg, encoding="utf-8")
        written.append(target)
        logger.info("Plot %s geschrieben (%s Kurven).", target, len(ordered))
    return written


def generate_table_pdf(cells: Mapping[CellKey, float], layout: str = "main", title: str = "") -> bytes:
    buffer = BytesIO()
    doc = SimpleDocTemplate(buffer, pagesize=landscape(A4), rightMargin=24, leftMargin=24, topMargin=30, bottomMargin=30)
    styles = getSampleStyleSheet()

    story: List = []
    story.append(Paragraph(title or "Accuracy (%) nach Manipulationstyp", styles["Title"]))
    story.append(Spacer(1, 12))

    grid = table_grid(cells, layout)
    body = styles["Normal"]
    data = [[Paragraph(cell.replace("&", "&amp;"), body) for cell in row] for row in grid]

    total_width = landscape(A4)[0] - (doc.leftMargin + doc.rightMargin)
    first_cols = [90, 50]
    other = (total_width - sum(first_cols)) / max(1, len(grid[0]) - 2)
    table = Table(data, repeatRows=1, colWidths=first_cols + [other] * (len(grid[0]) - 2))
    table.setStyle(TableStyle([
        ("BACKGROUND", (0, 0), (-1, 0), colors.lightgrey),
        ("GRID", (0, 0), (-1, -1), 0.5, colors.black),
        ("VALIGN", (0, 0), (-1, -1), "MIDDLE"),
        ("ALIGN", (1, 1), (-1, -1), "RIGHT"),
        ("FONTNAME", (0, 0), (-1, 0), "Helvetica-Bold"),
        ("ROWBACKGROUNDS", (0, 1), (-1, -1), [colors.whitesmoke, colors.white]),
    ]))
    story.append(table)

    doc.build(story)
    return buffer.getvalue()


def write_table_pdf(path: PathLike, cells: Mapping[CellKey, float], layout: str = "main", title: str = "") -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(generate_table_pdf(cells, layout, title))
    return target
