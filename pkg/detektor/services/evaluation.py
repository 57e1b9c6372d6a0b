"""Metriken (Accuracy, ROC/AUC, PR/AP), Score-Dateien und Accuracy-Tabellen."""
from __future__ import annotations

import json
import logging
from collections import OrderedDict, defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.metrics import auc as trapezoid_area
from sklearn.metrics import average_precision_score, precision_recall_curve, roc_curve

from ..config import write_json_atomic
from ..errors import DataLoadError, InvalidInputError, UndefinedMetricError
from ..models import (
    LABEL_FAKE,
    EvalReport,
    ScoreEntry,
    ScoreMetadata,
    ScoreSet,
    video_id_from_sample_id,
)

logger = logging.getLogger(__name__)

Point = Tuple[float, float]
CellKey = Tuple[str, int, str]
PathLike = Union[str, Path]

MANIPULATION_LABELS: "OrderedDict[str, str]" = OrderedDict(
    [
        ("deepfake", "Deepfake"),
        ("face2face", "Face2Face"),
        ("faceswap", "FaceSwap"),
        ("synthetic", "Synthetic"),
        ("all", "All"),
    ]
)

MAIN_COLUMNS: "OrderedDict[str, str]" = OrderedDict(
    [
        ("baseline", "Baseline"),
        ("resnet50", "ResNet50"),
        ("densenet121", "DenseNet"),
        ("resnet50+align", "ResNet50 + Alignment"),
        ("densenet121+align", "DenseNet + Alignment"),
        ("resnet50+align+bidir", "ResNet50 + Alignment + BiDir"),
        ("densenet121+align+bidir", "DenseNet + Alignment + BiDir"),
    ]
)

VARIANT_COLUMNS: "OrderedDict[str, str]" = OrderedDict(
    [
        ("base", "Base"),
        ("stn", "STN"),
        ("multi_recurrence", "Multi-Recurrence"),
    ]
)

MISSING_CELL = "-"


def accuracy(scores: ScoreSet, threshold: float = 0.5) -> float:
    predictions = (scores.scores >= threshold).astype(np.int64)
    return float(np.mean(predictions == scores.labels))


def roc_auc(scores: ScoreSet) -> Tuple[List[Point], float]:
    """ROC mit gruppierten Gleichständen; AUC per Trapezregel."""
    if not scores.has_both_classes():
        raise UndefinedMetricError("ROC/AUC braucht beide Klassen.")
    fpr, tpr, _ = roc_curve(scores.labels, scores.scores, pos_label=LABEL_FAKE, drop_intermediate=False)
    points = [(float(x), float(y)) for x, y in zip(fpr, tpr)]
    return points, float(trapezoid_area(fpr, tpr))


def pr_ap(scores: ScoreSet) -> Tuple[List[Point], float]:
    """PR-Punkte als (Recall, Precision) mit steigendem Recall; AP als Stufensumme."""
    labels = scores.labels
    if not np.any(labels == LABEL_FAKE):
        raise UndefinedMetricError("Precision/Recall braucht mindestens ein positives Beispiel.")
    precision, recall, _ = precision_recall_curve(labels, scores.scores, pos_label=LABEL_FAKE)
    points = [(float(r), float(p)) for r, p in zip(recall[::-1], precision[::-1])]
    return points, float(average_precision_score(labels, scores.scores, pos_label=LABEL_FAKE))


def build_report(scores: ScoreSet, threshold: float = 0.5) -> EvalReport:
    roc_points, auc_value = roc_auc(scores)
    pr_points, ap_value = pr_ap(scores)
    return EvalReport(
        accuracy=accuracy(scores, threshold),
        auc=auc_value,
        average_precision=ap_value,
        roc_points=roc_points,
        pr_points=pr_points,
        threshold=threshold,
        metadata=scores.metadata,
        n_samples=len(scores.entries),
    )


def aggregate_by_video(scores: ScoreSet) -> ScoreSet:
    """Mittlerer Score über alle Fenster eines Videos."""
    grouped: Dict[str, List[ScoreEntry]] = defaultdict(list)
    for entry in scores.entries:
        grouped[video_id_from_sample_id(entry.sample_id)].append(entry)
    entries: List[ScoreEntry] = []
    for video_id in sorted(grouped):
        members = grouped[video_id]
        labels = {e.label for e in members}
        if len(labels) != 1:
            raise InvalidInputError(f"Video {video_id} hat Fenster mit unterschiedlichen Labels.")
        mean_score = float(np.mean([e.score for e in members]))
        entries.append(ScoreEntry(sample_id=video_id, score=min(1.0, max(0.0, mean_score)), label=labels.pop()))
    metadata = ScoreMetadata.from_dict({**scores.metadata.to_dict(), "aggregation": "video"})
    return ScoreSet(entries=entries, metadata=metadata)


def metadata_path(score_path: PathLike) -> Path:
    path = Path(score_path)
    return path.with_name(path.stem + ".meta.json")


def write_scores(path: PathLike, scores: ScoreSet) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = target.with_name(target.name + ".tmp")
    with open(tmp_path, "w", encoding="utf-8") as f:
        for entry in scores.entries:
            f.write(json.dumps({"sample_id": entry.sample_id, "score": entry.score, "label": entry.label}) + "\n")
    tmp_path.replace(target)
    write_json_atomic(metadata_path(target), scores.metadata.to_dict())
    return target


def read_scores(path: PathLike) -> ScoreSet:
    source = Path(path)
    entries: List[ScoreEntry] = []
    try:
        with open(source, "r", encoding="utf-8") as f:
            for line_num, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                    entries.append(ScoreEntry(sample_id=str(row["sample_id"]), score=float(row["score"]), label=int(row["label"])))
                except (ValueError, KeyError, TypeError) as exc:
                    raise DataLoadError(f"{source}: Zeile {line_num} ist ungültig ({exc}).") from exc
    except FileNotFoundError as exc:
        raise DataLoadError(f"Score-Datei nicht gefunden: {source}") from exc

    metadata = ScoreMetadata()
    meta_file = metadata_path(source)
    if meta_file.is_file():
        with open(meta_file, "r", encoding="utf-8") as f:
            metadata = ScoreMetadata.from_dict(json.load(f))
    else:
        logger.warning("Keine Metadaten zu %s gefunden; Legende bleibt leer.", source)
    if not entries:
        raise DataLoadError(f"Score-Datei {source} enthält keine Einträge.")
    return ScoreSet(entries=entries, metadata=metadata)


def write_report(path: PathLike, report: EvalReport) -> Path:
    return write_json_atomic(path, report.to_dict())


def format_percent(value: float) -> str:
    """0.969 -> "96.9"; höchstens zwei Nachkommastellen."""
    text = f"{value * 100.0:.2f}"
    return text.rstrip("0").rstrip(".")


def _description_tokens(metadata: ScoreMetadata) -> List[str]:
    return metadata.description.split()


def column_key(metadata: ScoreMetadata, layout: str = "main") -> str:
    if layout == "variants":
        return "base" if metadata.variant == "plain" else metadata.variant
    tokens = _description_tokens(metadata)
    if not tokens:
        return "baseline"
    key = tokens[0]
    if "landmark" in tokens:
        key += "+align"
    if "bidir" in tokens:
        key += "+bidir"
    return key


def cells_from_reports(reports: Iterable[EvalReport], layout: str = "main") -> Dict[CellKey, float]:
    cells: Dict[CellKey, float] = {}
    for report in reports:
        meta = report.metadata
        key = (meta.manipulation, int(meta.frames or 1), column_key(meta, layout))
        if key in cells:
            logger.warning("Doppelte Tabellenzelle %s; letzter Wert gewinnt.", key)
        cells[key] = report.accuracy
    return cells


def _manipulation_order(name: str) -> Tuple[int, str]:
    keys = list(MANIPULATION_LABELS)
    return (keys.index(name), name) if name in keys else (len(keys), name)


def table_grid(cells: Mapping[CellKey, float], layout: str = "main") -> List[List[str]]:
    """Kopfzeile plus eine Zeile pro (Manipulation, Frames); fehlende Zellen als "-"."""
    known = MAIN_COLUMNS if layout == "main" else VARIANT_COLUMNS
    extra = sorted({variant for _, _, variant in cells} - set(known))
    columns = list(known) + extra
    header = ["Manipulation", "Frames"] + [known.get(c, c) for c in columns]

    rows = sorted({(m, f) for m, f, _ in cells}, key=lambda mf: (_manipulation_order(mf[0]), mf[1]))
    grid = [header]
    for manipulation, frames in rows:
        row = [MANIPULATION_LABELS.get(manipulation, manipulation), str(frames)]
        for column in columns:
            value = cells.get((manipulation, frames, column))
            row.append(MISSING_CELL if value is None else format_percent(value))
        grid.append(row)
    return grid


def report_table(cells: Mapping[CellKey, float], layout: str = "main") -> str:
    grid = table_grid(cells, layout)
    widths = [max(len(row[i]) for row in grid) for i in range(len(grid[0]))]
    lines = [" | ".join(cell.ljust(width) for cell, width in zip(grid[0], widths)).rstrip()]
    lines.append("-+-".join("-" * width for width in widths))
    for row in grid[1:]:
        lines.append(" | ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def group_by_manipulation(reports: Sequence[EvalReport]) -> "OrderedDict[str, List[EvalReport]]":
    grouped: Dict[str, List[EvalReport]] = defaultdict(list)
    for report in reports:
        grouped[report.metadata.manipulation].append(report)
    return OrderedDict((name, grouped[name]) for name in sorted(grouped, key=_manipulation_order))


def legend_label(report: EvalReport, mode: str) -> str:
    meta = report.metadata
    name = meta.description or "model"
    if meta.aggregation == "video":
        name += " (video)"
    if mode == "pr":
        return f"{name} (AP = {report.average_precision:.3f})"
    return f"{name} (AUC = {report.auc:.3f})"


def reports_from_score_files(paths: Iterable[PathLike], *, threshold: float = 0.5, aggregation: Optional[str] = None) -> List[EvalReport]:
    reports = []
    for path in paths:
        scores = read_scores(path)
        if aggregation == "video" and scores.metadata.aggregation != "video":
            scores = aggregate_by_video(scores)
        reports.append(build_report(scores, threshold))
    return reports
