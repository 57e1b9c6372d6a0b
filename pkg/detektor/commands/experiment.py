from __future__ import annotations

import argparse
import logging
from pathlib import Path
from typing import List

from ..config import RunConfig, echo_config, lookup, normalize_path, write_json_atomic
from ..errors import EXIT_OK, ConfigurationError, DataLoadError, OutputExistsError
from ..models import SampleDescriptor
from ..services.dataset import index_dataset
from ..services.evaluation import (
    aggregate_by_video,
    build_report,
    cells_from_reports,
    report_table,
    reports_from_score_files,
    write_report,
    write_scores,
)
from ..services.report_export import emit_plots, write_table_pdf
from ..services.training import (
    TrainResult,
    checkpoint_paths,
    evaluate_checkpoint,
    pretrain_backbone,
    spec_from_header,
    train_end_to_end,
)
from ..storage import has_cached, read_failed_windows, validate_checkpoint_archive

logger = logging.getLogger(__name__)


def cached_index(config: RunConfig) -> List[SampleDescriptor]:
    """Index des Datensatzes; jedes Fenster braucht einen Cache-Eintrag.

    Fenster, die preprocess als nicht ausrichtbar vermerkt hat, werden mit Warnung übergangen.
    Jeder andere fehlende Eintrag ist ein Datenfehler.
    """
    ds = config.dataset
    if not ds.root:
        raise ConfigurationError("dataset.root muss gesetzt sein.")
    descriptors = index_dataset(
        normalize_path(ds.root),
        ds.sequence_length,
        ds.resolved_stride(),
        default_manipulation=ds.default_manipulation,
    )
    cache_dir = ds.resolved_cache_dir()
    uncached = [d for d in descriptors if not has_cached(cache_dir, d)]
    if not uncached:
        return descriptors
    failed = set(read_failed_windows(cache_dir))
    unexplained = [d.sample_id for d in uncached if d.sample_id not in failed]
    if unexplained:
        raise DataLoadError(
            f"{len(unexplained)} von {len(descriptors)} Fenstern ohne Cache-Eintrag unter {cache_dir} "
            f"(z.B. {', '.join(unexplained[:3])}); preprocess erneut ausführen."
        )
    logger.warning("%s von %s Fenstern waren nicht ausrichtbar und werden ignoriert.", len(uncached), len(descriptors))
    skipped = {d.sample_id for d in uncached}
    return [d for d in descriptors if d.sample_id not in skipped]


def _check_checkpoint_matches_data(config: RunConfig, checkpoint: Path, head: str) -> None:
    """Ausschnittgröße und Fensterlänge der Daten müssen zum Checkpoint passen."""
    spec = spec_from_header(validate_checkpoint_archive(checkpoint))
    expected = {"dataset.crop_size": spec.image_size}
    if head != "frame":
        expected["dataset.sequence_length"] = spec.sequence_length
    conflicts = [
        f"{path}={lookup(config, path)} (Checkpoint: {value})"
        for path, value in expected.items()
        if lookup(config, path) != value
    ]
    if conflicts:
        raise ConfigurationError("Datenkonfiguration passt nicht zum Checkpoint: " + ", ".join(conflicts))


def _prepare_run_dir(config: RunConfig, raw_run_dir: str) -> Path:
    run_dir = normalize_path(raw_run_dir)
    best, _ = checkpoint_paths(run_dir)
    if best.exists():
        raise OutputExistsError(f"Laufverzeichnis enthält bereits einen Checkpoint: {best}")
    run_dir.mkdir(parents=True, exist_ok=True)
    echo_config(config, run_dir)
    return run_dir


def _print_result(result: TrainResult) -> None:
    accuracy = "n/a" if result.best_val_accuracy is None else f"{result.best_val_accuracy:.4f}"
    print(f"Bester Checkpoint: {result.best_checkpoint} (Epoche {result.best_epoch}, Val-Accuracy {accuracy})")
    print(f"Train-Loss: {result.initial_train_loss:.4f} -> {result.final_train_loss:.4f}")


def cmd_pretrain(config: RunConfig, args: argparse.Namespace) -> int:
    run_dir = _prepare_run_dir(config, args.run_dir)
    ds = config.dataset
    result = pretrain_backbone(
        config.model,
        cached_index(config),
        config.train.model_copy(update={"stage": "pretrain"}),
        run_dir=run_dir,
        cache_dir=ds.resolved_cache_dir(),
        mean=ds.normalization_mean,
        std=ds.normalization_std,
        num_workers=ds.num_workers,
    )
    _print_result(result)
    return EXIT_OK


def cmd_train(config: RunConfig, args: argparse.Namespace) -> int:
    run_dir = _prepare_run_dir(config, args.run_dir)
    ds = config.dataset
    pretrained = normalize_path(args.pretrained) if args.pretrained else None
    result = train_end_to_end(
        pretrained,
        config.model,
        cached_index(config),
        config.train,
        run_dir=run_dir,
        cache_dir=ds.resolved_cache_dir(),
        mean=ds.normalization_mean,
        std=ds.normalization_std,
        num_workers=ds.num_workers,
    )
    _print_result(result)
    return EXIT_OK


def cmd_eval(config: RunConfig, args: argparse.Namespace) -> int:
    ds = config.dataset
    ev = config.eval
    checkpoint = normalize_path(args.checkpoint)
    _check_checkpoint_matches_data(config, checkpoint, ev.head)
    evaluation = evaluate_checkpoint(
        checkpoint,
        cached_index(config),
        ev.split,
        cache_dir=ds.resolved_cache_dir(),
        head=ev.head,
        manipulation=ev.manipulation,
        alignment=ds.mode,
        batch_size=ev.batch_size,
        mean=ds.normalization_mean,
        std=ds.normalization_std,
        num_workers=ds.num_workers,
    )
    scores = evaluation.scores
    if ev.aggregation == "video":
        scores = aggregate_by_video(scores)
    out = write_scores(normalize_path(args.out), scores)

    report = build_report(scores, ev.threshold)
    report_path = normalize_path(args.report) if args.report else out.with_name(out.stem + ".report.json")
    write_report(report_path, report)
    print(
        f"{len(scores.entries)} Scores -> {out}\n"
        f"Accuracy {report.accuracy:.4f}, AUC {report.auc:.4f}, AP {report.average_precision:.4f}"
    )
    return EXIT_OK


def cmd_plot(config: RunConfig, args: argparse.Namespace) -> int:
    ev = config.eval
    out_dir = normalize_path(args.out)
    reports = reports_from_score_files(
        [normalize_path(p) for p in args.scores],
        threshold=ev.threshold,
        aggregation=ev.aggregation,
    )
    written: List[Path] = []
    for mode in args.modes:
        written.extend(emit_plots(reports, out_dir, mode, min_fpr=ev.linlog_min_fpr))

    cells = cells_from_reports(reports, ev.table_layout)
    table = report_table(cells, ev.table_layout)
    table_path = out_dir / f"table_{ev.table_layout}.txt"
    table_path.write_text(table, encoding="utf-8")
    ordered = sorted(reports, key=lambda r: (r.metadata.manipulation, r.metadata.description, r.metadata.frames or 0))
    write_json_atomic(out_dir / "reports.json", [report.to_dict() for report in ordered])
    if args.pdf:
        written.append(write_table_pdf(out_dir / f"table_{ev.table_layout}.pdf", cells, ev.table_layout))
    print(table, end="")
    print(f"{len(written)} Dateien unter {out_dir}")
    return EXIT_OK
