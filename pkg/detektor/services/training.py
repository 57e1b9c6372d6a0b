"""Zweistufiges Training: Einzelbild-Vortraining des Backbones, danach End-to-End mit rekurrentem Kopf."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import ValidationError
from torch import nn

from ..config import ModelSpec, TrainConfig
from ..errors import ConfigurationError
from ..models import (
    LABEL_FAKE,
    SampleDescriptor,
    ScoreEntry,
    ScoreMetadata,
    ScoreSet,
    TrainLogRecord,
)
from ..storage import CheckpointHeader, load_checkpoint, save_checkpoint
from .dataset import DEFAULT_MEAN, DEFAULT_STD, balance_labels, filter_split, load_batch
from .model import DetectorModel, build_model, load_model_arrays, model_arrays

logger = logging.getLogger(__name__)

STAGE_PRETRAIN = "pretrain"
STAGE_END_TO_END = "end_to_end"
LOG_FILENAME = "log.jsonl"
CHECKPOINT_DIRNAME = "checkpoints"
BEST_CHECKPOINT = "best.ckpt"
LAST_CHECKPOINT = "last.ckpt"

PathLike = Union[str, Path]


@dataclass
class TrainResult:
    run_dir: Path
    best_checkpoint: Path
    last_checkpoint: Path
    best_epoch: int
    best_val_accuracy: Optional[float]
    initial_train_loss: float
    final_train_loss: float
    history: List[TrainLogRecord] = field(default_factory=list)


@dataclass
class CheckpointEvaluation:
    scores: ScoreSet
    header: CheckpointHeader
    spec: ModelSpec


def set_seeds(seed: int) -> None:
    np.random.seed(int(seed))
    torch.manual_seed(int(seed))
    torch.backends.cudnn.deterministic = True
    torch.backends.cudnn.benchmark = False


def checkpoint_paths(run_dir: PathLike) -> Tuple[Path, Path]:
    base = Path(run_dir) / CHECKPOINT_DIRNAME
    return base / BEST_CHECKPOINT, base / LAST_CHECKPOINT


def spec_from_header(header: CheckpointHeader) -> ModelSpec:
    try:
        return ModelSpec.model_validate(header.model_spec)
    except ValidationError as exc:
        raise ConfigurationError(f"ModelSpec im Checkpoint ist ungültig: {exc}") from exc


class DetectorTrainer:
    """Besitzt Modell und Optimierer eines Laufs; schreibt log.jsonl und die Checkpoints."""

    def __init__(
        self,
        model: DetectorModel,
        *,
        spec: ModelSpec,
        cfg: TrainConfig,
        stage: str,
        run_dir: PathLike,
        cache_dir: PathLike,
        mean: Sequence[float] = DEFAULT_MEAN,
        std: Sequence[float] = DEFAULT_STD,
        num_workers: int = 0,
    ) -> None:
        self.model = model
        self.spec = spec
        self.cfg = cfg
        self.stage = stage
        self.run_dir = Path(run_dir)
        self.cache_dir = Path(cache_dir)
        self.mean = tuple(mean)
        self.std = tuple(std)
        self.num_workers = num_workers
        self.device = torch.device(cfg.device)
        self.model.to(self.device)
        self.loss_fn = nn.BCEWithLogitsLoss()
        self.optimizer = torch.optim.Adam(
            self.model.parameters(),
            lr=cfg.learning_rate,
            betas=tuple(cfg.betas),
            eps=cfg.eps,
        )
        self.best_path, self.last_path = checkpoint_paths(self.run_dir)
        self.log_path = self.run_dir / LOG_FILENAME

    def _logits_and_targets(self, images: torch.Tensor, labels: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        images = images.to(self.device)
        labels = labels.to(self.device)
        if self.stage == STAGE_PRETRAIN:
            # Zeit in den Batch gefaltet: jeder Frame erbt das Label seines Fensters
            logits = self.model.frame_logits(images)
            return logits.reshape(-1), labels.repeat_interleave(logits.shape[1])
        return self.model(images), labels

    def train_step(self, images: torch.Tensor, labels: torch.Tensor) -> Tuple[float, int, int]:
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        logits, targets = self._logits_and_targets(images, labels)
        loss = self.loss_fn(logits, targets)
        loss.backward()
        self.optimizer.step()
        correct = int(((torch.sigmoid(logits) >= self.cfg.threshold).float() == targets).sum().item())
        return float(loss.item()), correct, int(targets.numel())

    @torch.no_grad()
    def measure(self, descriptors: Sequence[SampleDescriptor]) -> Tuple[float, float]:
        """Mittlerer BCE-Loss und Accuracy ohne Parameteränderung."""
        self.model.eval()
        total_loss, correct, count = 0.0, 0, 0
        for batch in load_batch(
            descriptors,
            self.cache_dir,
            self.cfg.batch_size,
            None,
            mean=self.mean,
            std=self.std,
            num_workers=self.num_workers,
        ):
            logits, targets = self._logits_and_targets(batch.images, batch.labels)
            total_loss += float(self.loss_fn(logits, targets).item()) * targets.numel()
            correct += int(((torch.sigmoid(logits) >= self.cfg.threshold).float() == targets).sum().item())
            count += int(targets.numel())
        if count == 0:
            return float("nan"), float("nan")
        return total_loss / count, correct / count

    def run_epoch(self, descriptors: Sequence[SampleDescriptor], epoch: int) -> Tuple[float, float]:
        order = balance_labels(descriptors, self.cfg.seed + epoch) if self.cfg.balance_classes else list(descriptors)
        total_loss, correct, count = 0.0, 0, 0
        for step, batch in enumerate(
            load_batch(
                order,
                self.cache_dir,
                self.cfg.batch_size,
                self.cfg.seed * 1000 + epoch,
                mean=self.mean,
                std=self.std,
                num_workers=self.num_workers,
            )
        ):
            if self.cfg.max_steps_per_epoch is not None and step >= self.cfg.max_steps_per_epoch:
                break
            loss, batch_correct, batch_count = self.train_step(batch.images, batch.labels)
            total_loss += loss * batch_count
            correct += batch_correct
            count += batch_count
        return total_loss / max(count, 1), correct / max(count, 1)

    def _log(self, record: TrainLogRecord) -> None:
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.log_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
        logger.info(
            "[%s] Epoche %s %s: Loss %.4f, Accuracy %.4f",
            record.stage,
            record.epoch,
            record.split,
            record.loss,
            record.accuracy,
        )

    def _record(self, epoch: int, split: str, loss: float, accuracy: float, started: float) -> TrainLogRecord:
        record = TrainLogRecord(
            epoch=epoch,
            split=split,
            loss=max(0.0, loss),
            accuracy=min(1.0, max(0.0, accuracy)),
            wall_time=time.monotonic() - started,
            stage=self.stage,
        )
        self._log(record)
        return record

    def _save(self, path: Path, epoch: int, val_accuracy: Optional[float]) -> None:
        save_checkpoint(
            path,
            model_arrays(self.model),
            model_spec=self.spec.model_dump(mode="json"),
            seed=self.cfg.seed,
            stage=self.stage,
            epoch=epoch,
            val_accuracy=val_accuracy,
        )

    def fit(
        self,
        train_descriptors: Sequence[SampleDescriptor],
        val_descriptors: Sequence[SampleDescriptor],
    ) -> TrainResult:
        if not train_descriptors:
            raise ConfigurationError("Trainings-Index ist leer.")
        if not val_descriptors:
            logger.warning("Validierungs-Split ist leer; Auswahl des besten Checkpoints nach Trainings-Accuracy.")

        started = time.monotonic()
        history: List[TrainLogRecord] = []
        initial_loss, initial_acc = self.measure(train_descriptors)
        history.append(self._record(0, "train", initial_loss, initial_acc, started))

        best_accuracy: Optional[float] = None
        best_epoch = 0
        epochs_without_gain = 0
        final_loss = initial_loss
        for epoch in range(1, self.cfg.epochs + 1):
            train_loss, train_acc = self.run_epoch(train_descriptors, epoch)
            final_loss = train_loss
            history.append(self._record(epoch, "train", train_loss, train_acc, started))

            if val_descriptors:
                val_loss, val_acc = self.measure(val_descriptors)
                history.append(self._record(epoch, "val", val_loss, val_acc, started))
                selection = val_acc
            else:
                selection = train_acc

            self._save(self.last_path, epoch, selection if val_descriptors else None)
            if best_accuracy is None or selection > best_accuracy:
                best_accuracy = selection
                best_epoch = epoch
                epochs_without_gain = 0
                self._save(self.best_path, epoch, selection if val_descriptors else None)
            else:
                epochs_without_gain += 1
                patience = self.cfg.early_stop_patience
                if patience is not None and epochs_without_gain >= patience:
                    logger.info("Early Stopping nach Epoche %s (beste Epoche %s).", epoch, best_epoch)
                    break

        logger.info(
            "Training %s abgeschlossen: beste Epoche %s, Accuracy %s.",
            self.stage,
            best_epoch,
            "n/a" if best_accuracy is None else f"{best_accuracy:.4f}",
        )
        return TrainResult(
            run_dir=self.run_dir,
            best_checkpoint=self.best_path,
            last_checkpoint=self.last_path,
            best_epoch=best_epoch,
            best_val_accuracy=best_accuracy if val_descriptors else None,
            initial_train_loss=initial_loss,
            final_train_loss=final_loss,
            history=history,
        )


def _split_index(descriptors: Sequence[SampleDescriptor]) -> Tuple[List[SampleDescriptor], List[SampleDescriptor]]:
    return filter_split(descriptors, "train"), filter_split(descriptors, "val")


def pretrain_backbone(
    spec: ModelSpec,
    descriptors: Sequence[SampleDescriptor],
    cfg: TrainConfig,
    *,
    run_dir: PathLike,
    cache_dir: PathLike,
    mean: Sequence[float] = DEFAULT_MEAN,
    std: Sequence[float] = DEFAULT_STD,
    num_workers: int = 0,
) -> TrainResult:
    """Backbone plus Einzelbild-Klassifikator; jeder Frame eines Fensters ist ein eigenes Beispiel."""
    train, val = _split_index(descriptors)
    if not train:
        raise ConfigurationError("Trainings-Index für das Vortraining ist leer.")
    set_seeds(cfg.seed)
    model = build_model(spec, cfg.seed)
    trainer = DetectorTrainer(
        model,
        spec=spec,
        cfg=cfg,
        stage=STAGE_PRETRAIN,
        run_dir=run_dir,
        cache_dir=cache_dir,
        mean=mean,
        std=std,
        num_workers=num_workers,
    )
    return trainer.fit(train, val)


def _check_compatible(spec: ModelSpec, header: CheckpointHeader) -> None:
    stored = spec_from_header(header)
    fields = ("backbone", "feature_dim", "tinyconv_widths")
    conflicts = [name for name in fields if getattr(stored, name) != getattr(spec, name)]
    if conflicts:
        raise ConfigurationError(
            "Checkpoint-Backbone passt nicht zur ModelSpec (" + ", ".join(conflicts) + ")."
        )


PRETRAIN_TRANSFER_PREFIXES = ("encoder.", "frame_head.", "stn.")


def initialise_from_checkpoint(model: DetectorModel, spec: ModelSpec, checkpoint: PathLike) -> CheckpointHeader:
    """Übernimmt Backbone und Einzelbild-Klassifikator.

    Aus einem Vortrainings-Checkpoint kommen nur ``encoder.*``, ``frame_head.*`` und ``stn.*``; der
    Sequenzkopf bleibt frisch initialisiert und darf eine andere Form haben. End-to-End-Checkpoints
    liefern zusätzlich alle namensgleichen Einträge.
    """
    header, arrays = load_checkpoint(checkpoint)
    _check_compatible(spec, header)
    state_names = set(model.state_dict())
    encoder_names = {name for name in state_names if name.startswith("encoder.")}
    missing_encoder = sorted(encoder_names - set(arrays))
    if missing_encoder:
        raise ConfigurationError("Checkpoint enthält keine vollständigen Backbone-Gewichte: " + ", ".join(missing_encoder[:4]))
    usable = {name: value for name, value in arrays.items() if name in state_names}
    if header.stage == STAGE_PRETRAIN:
        usable = {name: value for name, value in usable.items() if name.startswith(PRETRAIN_TRANSFER_PREFIXES)}
    load_model_arrays(model, usable, strict=False)
    logger.info("Gewichte aus %s übernommen (%s von %s Einträgen).", checkpoint, len(usable), len(state_names))
    return header


def train_end_to_end(
    pretrained: Optional[PathLike],
    spec: ModelSpec,
    descriptors: Sequence[SampleDescriptor],
    cfg: TrainConfig,
    *,
    run_dir: PathLike,
    cache_dir: PathLike,
    mean: Sequence[float] = DEFAULT_MEAN,
    std: Sequence[float] = DEFAULT_STD,
    num_workers: int = 0,
) -> TrainResult:
    """Alle Parameter (Backbone, Kopf, Varianten-Module) werden gemeinsam optimiert."""
    train, val = _split_index(descriptors)
    if not train:
        raise ConfigurationError("Trainings-Index ist leer.")
    set_seeds(cfg.seed)
    model = build_model(spec, cfg.seed)
    if pretrained is not None:
        initialise_from_checkpoint(model, spec, pretrained)
    else:
        logger.info("Kein vortrainierter Checkpoint angegeben; Kaltstart.")
    trainer = DetectorTrainer(
        model,
        spec=spec,
        cfg=cfg,
        stage=STAGE_END_TO_END,
        run_dir=run_dir,
        cache_dir=cache_dir,
        mean=mean,
        std=std,
        num_workers=num_workers,
    )
    return trainer.fit(train, val)


def load_trained_model(checkpoint: PathLike) -> Tuple[DetectorModel, CheckpointHeader, ModelSpec]:
    header, arrays = load_checkpoint(checkpoint)
    spec = spec_from_header(header)
    model = build_model(spec, header.seed)
    load_model_arrays(model, arrays, strict=True)
    model.eval()
    return model, header, spec


def _manipulation_label(descriptors: Sequence[SampleDescriptor], requested: Optional[str]) -> str:
    if requested:
        return requested
    kinds = sorted({d.manipulation for d in descriptors if d.label == LABEL_FAKE})
    return kinds[0] if len(kinds) == 1 else "all"


@torch.no_grad()
def evaluate_checkpoint(
    checkpoint: PathLike,
    descriptors: Sequence[SampleDescriptor],
    split: str,
    *,
    cache_dir: PathLike,
    head: str = "recurrent",
    manipulation: Optional[str] = None,
    alignment: Optional[str] = None,
    batch_size: int = 16,
    mean: Sequence[float] = DEFAULT_MEAN,
    std: Sequence[float] = DEFAULT_STD,
    num_workers: int = 0,
) -> CheckpointEvaluation:
    """Deterministischer Vorwärtslauf über einen Split; ein Score pro Fenster."""
    selected = [
        d for d in filter_split(descriptors, split)
        if manipulation is None or d.label != LABEL_FAKE or d.manipulation == manipulation
    ]
    if not selected:
        raise ConfigurationError(f"Split {split!r} enthält keine Fenster.")
    model, header, spec = load_trained_model(checkpoint)

    labels_by_id: Dict[str, int] = {d.sample_id: d.label for d in selected}
    entries: List[ScoreEntry] = []
    for batch in load_batch(selected, cache_dir, batch_size, None, mean=mean, std=std, num_workers=num_workers):
        if head == "frame":
            probabilities = torch.sigmoid(model.frame_logits(batch.images)).mean(dim=1)
        else:
            probabilities = torch.sigmoid(model(batch.images))
        for sample_id, value in zip(batch.sample_ids, probabilities.tolist()):
            score = float(value)
            if not math.isfinite(score):
                raise ConfigurationError(f"Nicht-endlicher Score für {sample_id}; Checkpoint defekt?")
            entries.append(ScoreEntry(sample_id=sample_id, score=score, label=labels_by_id[sample_id]))

    description = spec.describe(alignment)
    if head == "frame":
        description += " frame-head"
    metadata = ScoreMetadata(
        manipulation=_manipulation_label(selected, manipulation),
        description=description,
        frames=spec.sequence_length if head != "frame" else 1,
        variant=spec.variant,
        split=split,
        aggregation="window",
    )
    logger.info("%s Fenster aus Split %s bewertet (%s).", len(entries), split, description)
    return CheckpointEvaluation(scores=ScoreSet(entries=entries, metadata=metadata), header=header, spec=spec)
