"""Kommandozeile: synth, preprocess, pretrain, train, eval, plot.

Konfiguration: Defaults < JSON-Datei (--config) < DETEKTOR_*-Umgebung < Flags.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from pydantic import ValidationError

from .config import RunConfig, load_run_config, parse_num_threads
from .errors import EXIT_BAD_CONFIG, DetektorError, exit_code_for

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConfigFlag:
    """Flag, dessen Wert auf einen oder mehrere gepunktete Konfigurationspfade geschrieben wird."""

    name: str
    targets: Tuple[str, ...]
    type: Optional[Callable[[str], Any]] = None
    help: str = ""
    choices: Optional[Tuple[str, ...]] = None
    boolean: bool = False

    @property
    def dest(self) -> str:
        return "cfg__" + self.name.lstrip("-").replace("-", "_")


def _floats(raw: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in raw.split(","))


SYNTH_FLAGS = (
    ConfigFlag("--n-videos-per-class", ("dataset.synth.n_videos_per_class",), int, "Videos pro Klasse"),
    ConfigFlag("--frames-per-video", ("dataset.synth.frames_per_video",), int, "Frames pro Video"),
    ConfigFlag("--image-size", ("dataset.synth.image_size",), int, "Kantenlänge der Frames in Pixeln"),
    ConfigFlag("--flicker-amplitude", ("dataset.synth.flicker_amplitude",), float, "Radius-Jitter der Fake-Videos (px)"),
    ConfigFlag("--drift-rate", ("dataset.synth.drift_rate",), float, "Phasendrift der Real-Videos (rad/Frame)"),
    ConfigFlag("--synth-seed", ("dataset.synth.seed",), int, "Seed des Generators"),
    ConfigFlag("--jpeg-quality", ("dataset.synth.jpeg_quality",), int, "JPEG-Qualität für den Kompressions-Roundtrip"),
    ConfigFlag("--split-fractions", ("dataset.synth.split_fractions",), _floats, "train,val,test-Anteile"),
)

DATASET_FLAGS = (
    ConfigFlag("--root", ("dataset.root",), str, "Datensatz-Wurzel"),
    ConfigFlag("--cache-dir", ("dataset.cache_dir",), str, "Crop-Cache (Default: <root>/cache/<mode>_t<T>_s<stride>_c<crop>)"),
    ConfigFlag("--mode", ("dataset.mode",), str, "Ausrichtung", choices=("landmark", "mask", "none")),
    ConfigFlag("--sequence-length", ("dataset.sequence_length", "model.sequence_length"), int, "Fensterlänge T"),
    ConfigFlag("--stride", ("dataset.stride",), int, "Schrittweite der Fenster (Default: T)"),
    ConfigFlag("--crop-size", ("dataset.crop_size", "model.image_size"), int, "Kantenlänge der Ausschnitte"),
    ConfigFlag("--mask-margin", ("dataset.mask_margin",), float, "Rand um die Masken-Bounding-Box (Anteil)"),
    ConfigFlag("--num-workers", ("dataset.num_workers",), int, "Lese-Worker für Batches"),
    ConfigFlag("--default-manipulation", ("dataset.default_manipulation",), str, "Manipulationstyp ohne Manifest-Angabe"),
)

MODEL_FLAGS = (
    ConfigFlag("--backbone", ("model.backbone",), str, "CNN-Backbone", choices=("tinyconv", "resnet50", "densenet121")),
    ConfigFlag("--feature-dim", ("model.feature_dim",), int, "Breite der Frame-Merkmale"),
    ConfigFlag("--hidden-size", ("model.recurrent.hidden_size",), int, "GRU-Breite"),
    ConfigFlag("--num-layers", ("model.recurrent.num_layers",), int, "GRU-Schichten"),
    ConfigFlag("--bidirectional", ("model.recurrent.bidirectional",), help="Bidirektionale GRU", boolean=True),
    ConfigFlag("--variant", ("model.variant",), str, "Modellvariante", choices=("plain", "stn", "multi_recurrence")),
    ConfigFlag("--pretrained-weights", ("model.pretrained_weights",), str, "State-Dict für ResNet/DenseNet"),
)

TRAIN_FLAGS = (
    ConfigFlag("--learning-rate", ("train.learning_rate",), float, "Adam-Lernrate"),
    ConfigFlag("--batch-size", ("train.batch_size",), int, "Batchgröße"),
    ConfigFlag("--epochs", ("train.epochs",), int, "Maximale Epochen"),
    ConfigFlag("--seed", ("train.seed",), int, "Seed für Initialisierung und Reihenfolge"),
    ConfigFlag("--early-stop-patience", ("train.early_stop_patience",), int, "Epochen ohne Verbesserung bis zum Abbruch"),
    ConfigFlag("--max-steps-per-epoch", ("train.max_steps_per_epoch",), int, "Obergrenze Schritte pro Epoche"),
    ConfigFlag("--balance-classes", ("train.balance_classes",), help="Klassen pro Epoche ausgleichen", boolean=True),
    ConfigFlag("--device", ("train.device",), str, "torch-Device"),
)

EVAL_FLAGS = (
    ConfigFlag("--split", ("eval.split",), str, "Auszuwertender Split", choices=("train", "val", "test")),
    ConfigFlag("--head", ("eval.head",), str, "Rekurrenter Kopf oder Einzelbild-Klassifikator", choices=("recurrent", "frame")),
    ConfigFlag("--aggregation", ("eval.aggregation",), str, "Pro Fenster oder pro Video", choices=("window", "video")),
    ConfigFlag("--threshold", ("eval.threshold", "train.threshold"), float, "Schwelle für die Accuracy"),
    ConfigFlag("--manipulation", ("eval.manipulation",), str, "Nur diesen Manipulationstyp auswerten"),
    ConfigFlag("--eval-batch-size", ("eval.batch_size",), int, "Batchgröße der Auswertung"),
)

PLOT_FLAGS = (
    ConfigFlag("--min-fpr", ("eval.linlog_min_fpr",), float, "Untere Grenze der log. FPR-Achse"),
    ConfigFlag("--table-layout", ("eval.table_layout",), str, "Tabellenlayout", choices=("main", "variants")),
    ConfigFlag("--aggregation", ("eval.aggregation",), str, "Pro Fenster oder pro Video", choices=("window", "video")),
    ConfigFlag("--threshold", ("eval.threshold",), float, "Schwelle für die Accuracy"),
)

COMMAND_FLAGS: Dict[str, Tuple[ConfigFlag, ...]] = {
    "synth": SYNTH_FLAGS,
    "preprocess": DATASET_FLAGS,
    "pretrain": DATASET_FLAGS + MODEL_FLAGS + TRAIN_FLAGS,
    "train": DATASET_FLAGS + MODEL_FLAGS + TRAIN_FLAGS,
    "eval": DATASET_FLAGS + EVAL_FLAGS,
    "plot": PLOT_FLAGS,
}


def _add_config_flags(parser: argparse.ArgumentParser, flags: Sequence[ConfigFlag]) -> None:
    for flag in flags:
        targets = ", ".join(flag.targets)
        if flag.boolean:
            parser.add_argument(
                flag.name,
                dest=flag.dest,
                action=argparse.BooleanOptionalAction,
                default=None,
                help=f"{flag.help} [{targets}]",
            )
        else:
            parser.add_argument(
                flag.name,
                dest=flag.dest,
                type=flag.type,
                choices=flag.choices,
                default=None,
                help=f"{flag.help} [{targets}]",
            )


def build_parser() -> argparse.ArgumentParser:
    try:
        from version import get_version_info
    except ImportError:
        def get_version_info() -> Dict[str, str]:
            return {"version": "unknown", "build_date": "unknown"}

    info = get_version_info()
    parser = argparse.ArgumentParser(prog="detektor", description="Deepfake-Erkennung auf Face-Tubelets.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {info['version']} ({info['build_date']})")
    sub = parser.add_subparsers(dest="command", required=True)

    def _command(name: str, help_text: str) -> argparse.ArgumentParser:
        cmd = sub.add_parser(name, help=help_text, description=help_text)
        cmd.add_argument("--config", help="JSON-Konfigurationsdatei")
        _add_config_flags(cmd, COMMAND_FLAGS[name])
        return cmd

    synth = _command("synth", "Synthetischen Benchmark erzeugen")
    synth.add_argument("--out", required=True, help="Zielverzeichnis (leer oder nicht vorhanden)")

    _command("preprocess", "Tubelets ausrichten und im Crop-Cache ablegen")

    pretrain = _command("pretrain", "Backbone mit Einzelbild-Klassifikator vortrainieren")
    pretrain.add_argument("--run-dir", required=True, help="Laufverzeichnis (config.json, log.jsonl, checkpoints/)")

    train = _command("train", "End-to-End-Training mit rekurrentem Kopf")
    train.add_argument("--run-dir", required=True, help="Laufverzeichnis (config.json, log.jsonl, checkpoints/)")
    train.add_argument("--pretrained", help="Checkpoint aus dem Vortraining (sonst Kaltstart)")

    evaluate = _command("eval", "Checkpoint auf einem Split bewerten und Score-Datei schreiben")
    evaluate.add_argument("--checkpoint", required=True, help="Checkpoint-Datei (*.ckpt)")
    evaluate.add_argument("--out", required=True, help="Score-Datei (JSON Lines)")
    evaluate.add_argument("--report", help="Report-Datei (Default: <out>.report.json)")

    plot = _command("plot", "SVG-Kurven und Accuracy-Tabelle aus Score-Dateien erzeugen")
    plot.add_argument("--scores", nargs="+", required=True, help="Score-Dateien")
    plot.add_argument("--out", required=True, help="Ausgabeverzeichnis")
    plot.add_argument(
        "--modes",
        nargs="+",
        choices=("roc_linear", "roc_linlog", "pr"),
        default=["roc_linear", "roc_linlog", "pr"],
        help="Plot-Arten",
    )
    plot.add_argument("--pdf", action="store_true", help="Tabelle zusätzlich als PDF schreiben")
    return parser


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    for flag in COMMAND_FLAGS.get(args.command, ()):
        value = getattr(args, flag.dest, None)
        if value is None:
            continue
        for target in flag.targets:
            overrides[target] = list(value) if isinstance(value, tuple) else value
    return overrides


def resolve_config(args: argparse.Namespace, environ: Optional[Dict[str, str]] = None) -> RunConfig:
    return load_run_config(getattr(args, "config", None), environ=environ, overrides=collect_overrides(args))


def _dispatch(args: argparse.Namespace, config: RunConfig) -> int:
    from .commands import data, experiment

    handlers: Dict[str, Callable[[RunConfig, argparse.Namespace], int]] = {
        "synth": data.cmd_synth,
        "preprocess": data.cmd_preprocess,
        "pretrain": experiment.cmd_pretrain,
        "train": experiment.cmd_train,
        "eval": experiment.cmd_eval,
        "plot": experiment.cmd_plot,
    }
    return handlers[args.command](config, args)


def _configure_threads() -> None:
    threads = parse_num_threads()
    if threads is None:
        return
    import torch

    torch.set_num_threads(threads)
    logger.info("torch nutzt %s Threads.", threads)


def main(argv: Optional[List[str]] = None, environ: Optional[Dict[str, str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args, environ)
        _configure_threads()
        return _dispatch(args, config)
    except ValidationError as exc:
        logger.error("Ungültige Konfiguration: %s", exc)
        print(f"Fehler: ungültige Konfiguration: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except DetektorError as exc:
        code = exit_code_for(exc)
        logger.error("%s: %s", type(exc).__name__, exc)
        print(f"Fehler ({type(exc).__name__}): {exc}", file=sys.stderr)
        return code
    except Exception as exc:
        logger.exception("Unerwarteter Fehler in '%s'.", args.command)
        print(f"Unerwarteter Fehler: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
