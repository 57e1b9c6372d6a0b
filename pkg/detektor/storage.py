"""Crop-Cache und Checkpoint-Archive.

Crop-Cache, pro Tubelet:
    <cache>/<sample_id>.f32   rohes float32 little-endian, Form T x H x W x 3, row-major, Kanal zuletzt
    <cache>/<sample_id>.json  Metadaten (siehe `write_cached_tubelet`)
    <cache>/_failed_windows.json  sample_ids, die preprocess nicht ausrichten konnte

Checkpoint (*.ckpt) ist ein ZIP-Archiv:
    header.json               {format_version, model_spec, seed, stage, epoch, val_accuracy, manifest}
    tensors/<name>.f32        rohes float32 little-endian pro State-Dict-Eintrag, Form laut manifest
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np

from .config import write_json_atomic
from .errors import ConfigurationError, DataLoadError
from .models import SampleDescriptor, Tubelet

logger = logging.getLogger(__name__)

CACHE_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1
RAW_DTYPE = "<f4"
HEADER_NAME = "header.json"
TENSOR_DIR = "tensors/"
FAILED_WINDOWS_NAME = "_failed_windows.json"

# Feste Zeitstempel, damit identische Inhalte byte-identische Archive ergeben
_ZIP_DATE_TIME = (1980, 1, 1, 0, 0, 0)

PathLike = Union[str, "os.PathLike[str]"]


def cache_paths(cache_dir: PathLike, sample_id: str) -> Tuple[Path, Path]:
    base = Path(cache_dir)
    return base / f"{sample_id}.f32", base / f"{sample_id}.json"


def source_fingerprint(
    descriptor: SampleDescriptor,
    *,
    mode: str,
    crop_size: int,
    margin: float,
    source_files: Iterable[PathLike] = (),
) -> str:
    digest = hashlib.blake2b(digest_size=16)
    token = {
        "sample_id": descriptor.sample_id,
        "frame_indices": list(descriptor.frame_indices),
        "label": descriptor.label,
        "mode": mode,
        "crop_size": crop_size,
        "margin": margin,
    }
    digest.update(json.dumps(token, sort_keys=True).encode("utf-8"))
    for path in source_files:
        try:
            stat = os.stat(path)
            digest.update(f"{path}:{stat.st_size}:{stat.st_mtime_ns}".encode("utf-8"))
        except OSError:
            digest.update(f"{path}:missing".encode("utf-8"))
    return digest.hexdigest()


def read_cache_sidecar(cache_dir: PathLike, sample_id: str) -> Optional[Dict[str, Any]]:
    _, meta_path = cache_paths(cache_dir, sample_id)
    try:
        with open(meta_path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError):
        return None


def has_cached(cache_dir: PathLike, descriptor: SampleDescriptor) -> bool:
    raw_path, meta_path = cache_paths(cache_dir, descriptor.sample_id)
    return raw_path.is_file() and meta_path.is_file()


def is_cache_current(cache_dir: PathLike, descriptor: SampleDescriptor, fingerprint: str) -> bool:
    if not has_cached(cache_dir, descriptor):
        return False
    sidecar = read_cache_sidecar(cache_dir, descriptor.sample_id)
    return bool(sidecar) and sidecar.get("fingerprint") == fingerprint


def write_failed_windows(cache_dir: PathLike, sample_ids: Iterable[str]) -> Path:
    """Fenster, die preprocess nicht ausrichten konnte; ersetzt die Liste des letzten Laufs."""
    return write_json_atomic(Path(cache_dir) / FAILED_WINDOWS_NAME, sorted(set(sample_ids)))


def read_failed_windows(cache_dir: PathLike) -> List[str]:
    path = Path(cache_dir) / FAILED_WINDOWS_NAME
    if not path.is_file():
        return []
    try:
        with open(path, "r", encoding="utf-8") as f:
            return [str(sample_id) for sample_id in json.load(f)]
    except (ValueError, TypeError) as exc:
        raise DataLoadError(f"Liste fehlgeschlagener Fenster ist ungültig: {path}") from exc


def write_cached_tubelet(
    cache_dir: PathLike,
    descriptor: SampleDescriptor,
    tubelet: Tubelet,
    *,
    fingerprint: str = "",
) -> Path:
    array = np.ascontiguousarray(tubelet.as_array(), dtype=RAW_DTYPE)
    raw_path, meta_path = cache_paths(cache_dir, descriptor.sample_id)
    raw_path.parent.mkdir(parents=True, exist_ok=True)

    tmp_path = raw_path.with_name(raw_path.name + ".tmp")
    with open(tmp_path, "wb") as f:
        f.write(array.tobytes(order="C"))
    os.replace(tmp_path, raw_path)

    write_json_atomic(
        meta_path,
        {
            "format_version": CACHE_FORMAT_VERSION,
            "sample_id": descriptor.sample_id,
            "video_id": descriptor.video_id,
            "frame_indices": list(descriptor.frame_indices),
            "label": descriptor.label,
            "split": descriptor.split,
            "manipulation": descriptor.manipulation,
            "alignment_mode": tubelet.alignment_mode.value,
            "shape": list(array.shape),
            "dtype": RAW_DTYPE,
            "layout": "THWC",
            "fingerprint": fingerprint,
        },
    )
    return raw_path


def read_cached_tubelet(cache_dir: PathLike, descriptor: SampleDescriptor) -> np.ndarray:
    raw_path, _ = cache_paths(cache_dir, descriptor.sample_id)
    sidecar = read_cache_sidecar(cache_dir, descriptor.sample_id)
    if sidecar is None or not raw_path.is_file():
        raise DataLoadError(f"Cache-Eintrag fehlt für {descriptor.sample_id} (Video {descriptor.video_id}).")
    shape = tuple(int(v) for v in sidecar.get("shape", ()))
    data = np.fromfile(raw_path, dtype=RAW_DTYPE)
    if len(shape) != 4 or data.size != int(np.prod(shape)):
        raise DataLoadError(f"Cache-Eintrag {descriptor.sample_id} ist beschädigt (Größe passt nicht zur Form).")
    return data.reshape(shape).astype(np.float32, copy=False)


@dataclass
class CheckpointHeader:
    model_spec: Dict[str, Any]
    seed: int
    stage: str
    epoch: int
    val_accuracy: Optional[float] = None
    manifest: Dict[str, List[int]] = field(default_factory=dict)
    format_version: int = CHECKPOINT_FORMAT_VERSION

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format_version": self.format_version,
            "model_spec": self.model_spec,
            "seed": self.seed,
            "stage": self.stage,
            "epoch": self.epoch,
            "val_accuracy": self.val_accuracy,
            "manifest": self.manifest,
        }


def _zip_info(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE_TIME)
    info.compress_type = zipfile.ZIP_STORED
    return info


def save_checkpoint(
    path: PathLike,
    arrays: Mapping[str, np.ndarray],
    *,
    model_spec: Dict[str, Any],
    seed: int,
    stage: str,
    epoch: int,
    val_accuracy: Optional[float] = None,
) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    manifest = {name: [int(d) for d in np.shape(value)] for name, value in arrays.items()}
    header = CheckpointHeader(
        model_spec=model_spec,
        seed=seed,
        stage=stage,
        epoch=epoch,
        val_accuracy=val_accuracy,
        manifest=manifest,
    )
    tmp_path = target.with_name(target.name + ".tmp")
    with zipfile.ZipFile(tmp_path, "w") as archive:
        archive.writestr(_zip_info(HEADER_NAME), json.dumps(header.to_dict(), indent=2, sort_keys=True))
        for name, value in arrays.items():
            blob = np.ascontiguousarray(value, dtype=RAW_DTYPE).tobytes(order="C")
            archive.writestr(_zip_info(f"{TENSOR_DIR}{name}.f32"), blob)
    os.replace(tmp_path, target)
    return target


def _read_header(archive: zipfile.ZipFile, path: PathLike) -> CheckpointHeader:
    try:
        payload = json.loads(archive.read(HEADER_NAME).decode("utf-8"))
    except KeyError as exc:
        raise ConfigurationError(f"Checkpoint {path} enthält keinen Header.") from exc
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"Checkpoint-Header von {path} ist ungültig: {exc}") from exc
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ConfigurationError(
            f"Checkpoint {path}: Formatversion {payload.get('format_version')} wird nicht unterstützt."
        )
    return CheckpointHeader(
        model_spec=payload["model_spec"],
        seed=int(payload["seed"]),
        stage=str(payload["stage"]),
        epoch=int(payload["epoch"]),
        val_accuracy=payload.get("val_accuracy"),
        manifest={k: list(v) for k, v in payload.get("manifest", {}).items()},
    )


def validate_checkpoint_archive(path: PathLike) -> CheckpointHeader:
    """Prüft Header, Vollständigkeit des Manifests und Blob-Größen, ohne Tensoren zu laden."""
    try:
        with zipfile.ZipFile(path, "r") as archive:
            header = _read_header(archive, path)
            members = {info.filename: info for info in archive.infolist()}
    except FileNotFoundError as exc:
        raise ConfigurationError(f"Checkpoint nicht gefunden: {path}") from exc
    except zipfile.BadZipFile as exc:
        raise ConfigurationError(f"Datei ist kein gültiges Checkpoint-Archiv: {path}") from exc

    missing = []
    for name, shape in header.manifest.items():
        info = members.get(f"{TENSOR_DIR}{name}.f32")
        expected = int(np.prod(shape)) * np.dtype(RAW_DTYPE).itemsize
        if info is None or info.file_size != expected:
            missing.append(name)
    if missing:
        raise ConfigurationError("Checkpoint unvollständig, fehlerhafte Tensoren: " + ", ".join(sorted(missing)))
    return header


def load_checkpoint(path: PathLike) -> Tuple[CheckpointHeader, Dict[str, np.ndarray]]:
    header = validate_checkpoint_archive(path)
    arrays: Dict[str, np.ndarray] = {}
    with zipfile.ZipFile(path, "r") as archive:
        for name, shape in header.manifest.items():
            blob = archive.read(f"{TENSOR_DIR}{name}.f32")
            arrays[name] = np.frombuffer(blob, dtype=RAW_DTYPE).reshape(shape).astype(np.float32)
    logger.info("Checkpoint %s geladen (Stufe %s, Epoche %s).", path, header.stage, header.epoch)
    return header, arrays
