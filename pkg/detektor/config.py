from __future__ import annotations

import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Dict, Literal, Mapping, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigurationError
from .models import CROP_SIZE, Manipulation, Split

logger = logging.getLogger(__name__)

ENV_PREFIX = "DETEKTOR_"
ENV_SECTION_SEPARATOR = "__"
RUN_CONFIG_FILENAME = "config.json"

PathLike = Union[str, "os.PathLike[str]"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SynthConfig(_Section):
    n_videos_per_class: int = Field(200, ge=1)
    frames_per_video: int = Field(10, ge=1)
    image_size: int = Field(CROP_SIZE, ge=16)
    flicker_amplitude: float = Field(1.5, ge=0.0, le=10.0)
    drift_rate: float = Field(0.2, ge=0.0, le=math.pi)
    seed: int = 7
    disc_radius_fraction: float = Field(0.3, gt=0.0, lt=0.5)
    texture_contrast: float = Field(0.35, gt=0.0, le=0.5)
    noise_std: float = Field(0.1, ge=0.0, le=0.5)
    jpeg_quality: Optional[int] = Field(None, ge=1, le=100)
    split_fractions: Tuple[float, float, float] = (0.72, 0.14, 0.14)

    @field_validator("split_fractions")
    @classmethod
    def _fractions_sum_to_one(cls, value: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(v < 0 for v in value) or abs(sum(value) - 1.0) > 1e-6:
            raise ValueError("split_fractions müssen nichtnegativ sein und sich zu 1 summieren")
        return value


class DatasetConfig(_Section):
    root: Optional[str] = None
    cache_dir: Optional[str] = None
    sequence_length: int = Field(5, ge=1)
    stride: Optional[int] = Field(None, ge=1)
    mode: Literal["landmark", "mask", "none"] = "landmark"
    crop_size: int = Field(CROP_SIZE, ge=8)
    mask_margin: float = Field(0.3, ge=0.0)
    normalization_mean: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    normalization_std: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    num_workers: int = Field(0, ge=0)
    default_manipulation: Manipulation = "synthetic"
    synth: SynthConfig = Field(default_factory=SynthConfig)

    @field_validator("normalization_std")
    @classmethod
    def _std_positive(cls, value: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(v <= 0 for v in value):
            raise ValueError("normalization_std muss positiv sein")
        return value

    def resolved_stride(self) -> int:
        # Ohne Angabe: nicht überlappende Fenster
        return self.stride if self.stride is not None else self.sequence_length

    def resolved_cache_dir(self) -> Path:
        if self.cache_dir:
            return normalize_path(self.cache_dir)
        if not self.root:
            raise ConfigurationError("dataset.root oder dataset.cache_dir muss gesetzt sein.")
        name = f"{self.mode}_t{self.sequence_length}_s{self.resolved_stride()}_c{self.crop_size}"
        return normalize_path(self.root) / "cache" / name


class RecurrentHeadSpec(_Section):
    hidden_size: int = Field(256, ge=1)
    bidirectional: bool = False
    num_layers: int = Field(1, ge=1)
    cell: Literal["gru"] = "gru"

    @property
    def output_width(self) -> int:
        return self.hidden_size * (2 if self.bidirectional else 1)


class STNSpec(_Section):
    conv_channels: Tuple[int, int] = (8, 10)
    kernel_sizes: Tuple[int, int] = (7, 5)
    pooled_size: int = Field(3, ge=1)
    hidden_size: int = Field(32, ge=1)
    sampler: Literal["bilinear"] = "bilinear"
    init: Literal["identity"] = "identity"
    regressor_outputs: Literal[6] = 6


def _default_recurrent_head() -> RecurrentHeadSpec:
    return RecurrentHeadSpec(hidden_size=32, bidirectional=True)


class ModelSpec(_Section):
    backbone: Literal["resnet50", "densenet121", "tinyconv"] = "tinyconv"
    feature_dim: Optional[int] = Field(None, ge=1)
    recurrent: RecurrentHeadSpec = Field(default_factory=_default_recurrent_head)
    variant: Literal["plain", "stn", "multi_recurrence"] = "plain"
    sequence_length: int = Field(5, ge=1)
    image_size: int = Field(CROP_SIZE, ge=8)
    tinyconv_widths: Tuple[int, ...] = (8, 16, 32, 64)
    stn: STNSpec = Field(default_factory=STNSpec)
    pretrained_weights: Optional[str] = None

    @model_validator(mode="after")
    def _check_backbone_scale(self) -> "ModelSpec":
        if self.backbone == "tinyconv" and self.image_size > CROP_SIZE:
            raise ValueError(f"tinyconv ist nur bis image_size {CROP_SIZE} zulässig")
        if not self.tinyconv_widths or any(w < 1 for w in self.tinyconv_widths):
            raise ValueError("tinyconv_widths braucht mindestens eine positive Breite")
        return self

    def describe(self, alignment: Optional[str] = None) -> str:
        """Legendentext: Backbone, Frames, Ausrichtung, Richtung, Variante."""
        parts = [self.backbone, f"{self.sequence_length}f"]
        if alignment:
            parts.append(alignment)
        parts.append("bidir" if self.recurrent.bidirectional else "unidir")
        if self.variant != "plain":
            parts.append(self.variant)
        return " ".join(parts)


class TrainConfig(_Section):
    stage: Literal["pretrain", "end_to_end"] = "end_to_end"
    learning_rate: float = Field(1e-4, ge=0.0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0.0)
    batch_size: int = Field(16, ge=1)
    epochs: int = Field(30, ge=1)
    seed: int = 7
    early_stop_patience: Optional[int] = Field(5, ge=1)
    balance_classes: bool = True
    max_steps_per_epoch: Optional[int] = Field(None, ge=1)
    threshold: float = Field(0.5, ge=0.0, le=1.0)
    device: str = "cpu"

    @field_validator("learning_rate")
    @classmethod
    def _warn_zero_lr(cls, value: float) -> float:
        if value == 0.0:
            logger.warning("Lernrate 0: Parameter bleiben unverändert (Einfrier-Lauf).")
        return value


class EvalConfig(_Section):
    split: Split = "test"
    head: Literal["recurrent", "frame"] = "recurrent"
    aggregation: Literal["window", "video"] = "window"
    threshold: float = Field(0.5, ge=0.0, le=1.0)
    manipulation: Optional[Manipulation] = None
    batch_size: int = Field(16, ge=1)
    linlog_min_fpr: float = Field(1e-3, gt=0.0, lt=1.0)
    table_layout: Literal["main", "variants"] = "main"


class RunConfig(_Section):
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    model: ModelSpec = Field(default_factory=ModelSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)


def normalize_path(raw_path: PathLike, base_dir: Optional[PathLike] = None) -> Path:
    value = str(raw_path or "").strip()
    if not value:
        raise ConfigurationError("Pfad darf nicht leer sein.")
    expanded = os.path.expanduser(os.path.expandvars(value))
    if not os.path.isabs(expanded):
        expanded = os.path.join(str(base_dir) if base_dir else os.getcwd(), expanded)
    return Path(os.path.abspath(expanded))


def write_json_atomic(path: PathLike, payload: Any) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = target.with_name(target.name + ".tmp")
    with open(tmp_path, "w", encoding="utf-8") as f:
        json.dump(payload, f, ensure_ascii=True, indent=2, sort_keys=True)
    os.replace(tmp_path, target)
    return target


def _parse_env_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    """Verschachtelte Overrides aus DETEKTOR_<SEKTION>__<FELD>[__<UNTERFELD>]."""
    source = os.environ if environ is None else environ
    nested: Dict[str, Any] = {}
    for key, raw in source.items():
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split(ENV_SECTION_SEPARATOR.lower())
        if len(path) < 2 or not all(path):
            # Laufzeitschalter wie DETEKTOR_LOG_LEVEL gehören nicht zur RunConfig
            continue
        cursor = nested
        for part in path[:-1]:
            cursor = cursor.setdefault(part, {})
            if not isinstance(cursor, dict):
                logger.warning("Widersprüchliche Umgebungsvariable %s wird ignoriert.", key)
                break
        else:
            cursor[path[-1]] = _parse_env_value(raw)
    return nested


def _deep_merge(base: Dict[str, Any], override: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _validate(payload: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(payload)
    except ValidationError as exc:
        raise ConfigurationError(f"Ungültige Konfiguration: {exc}") from exc


def read_config_file(path: PathLike) -> Dict[str, Any]:
    config_path = normalize_path(path)
    try:
        with open(config_path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"Konfigurationsdatei nicht gefunden: {config_path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"Konfigurationsdatei ist kein gültiges JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigurationError("Konfiguration muss ein JSON-Objekt sein.")
    return payload


def load_run_config(
    path: Optional[PathLike] = None,
    *,
    environ: Optional[Mapping[str, str]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """Defaults < Datei < Umgebung < Flags."""
    payload: Dict[str, Any] = read_config_file(path) if path else {}
    payload = _deep_merge(payload, env_overrides(environ))
    if overrides:
        payload = _deep_merge(payload, dotted_to_nested(overrides))
    return _validate(payload)


def dotted_to_nested(values: Mapping[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for dotted, value in values.items():
        parts = dotted.split(".")
        cursor = nested
        for part in parts[:-1]:
            cursor = cursor.setdefault(part, {})
        cursor[parts[-1]] = value
    return nested


def lookup(config: RunConfig, dotted: str) -> Any:
    value: Any = config
    for part in dotted.split("."):
        value = getattr(value, part)
    return value


def echo_config(config: RunConfig, run_dir: PathLike) -> Path:
    return write_json_atomic(Path(run_dir) / RUN_CONFIG_FILENAME, config.model_dump(mode="json"))


def parse_num_threads() -> Optional[int]:
    raw = os.getenv("DETEKTOR_NUM_THREADS", "").strip()
    if not raw:
        return None
    try:
        return max(1, int(raw))
    except ValueError:
        logger.warning("Ungültiger Wert für DETEKTOR_NUM_THREADS (%s). Verwende Torch-Default.", raw)
        return None


def parse_log_level(default: str = "INFO") -> str:
    raw = os.getenv("DETEKTOR_LOG_LEVEL", "").strip().upper()
    if not raw:
        return default
    if raw not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
        logger.warning("Ungültiger Wert für DETEKTOR_LOG_LEVEL (%s). Verwende %s.", raw, default)
        return default
    return raw
