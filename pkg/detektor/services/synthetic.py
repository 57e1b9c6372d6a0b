"""Synthetischer Benchmark mit rein zeitlichem Klassensignal.

Jedes Video zeigt eine texturierte Scheibe (Sinusgitter, Frequenz und Orientierung pro Video
zufällig) vor Rauschhintergrund. Das Gitter hat nur 0.4 bis 0.7 Perioden pro Scheibendurchmesser,
die Phase verschiebt also Helligkeitsschwerpunkt und Mittelwert der Scheibe und bleibt nach
globalem Pooling sichtbar. "real": Phase wandert gleichmäßig um drift_rate pro Frame,
der Radiusversatz ist pro Video konstant. "fake": Phase pro Frame unabhängig gleichverteilt,
Radiusversatz pro Frame neu gezogen (±flicker_amplitude). Einzelbilder beider Klassen haben
dieselbe Verteilung; unterscheidbar ist nur die Kohärenz zwischen Frames.
"""
from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Tuple, Union

import cv2
import numpy as np

from ..config import SynthConfig, write_json_atomic
from ..errors import DataLoadError, OutputExistsError
from ..models import CROP_SIZE, LABEL_DIRS, LABEL_FAKE, LABEL_REAL
from .alignment import frontal_face_layout
from .dataset import frame_path, landmark_file_path, mask_path, splits_path, stratified_splits
from .tubelet import write_landmark_file

logger = logging.getLogger(__name__)

SYNTH_MANIPULATION = "synthetic"
SYNTH_INFO_FILENAME = "synth.json"

# Scheibendurchmesser entspricht 144 px des 224er-Ausschnitts
_DISC_TO_FACE = CROP_SIZE / 144.0

_PERIODS_PER_DIAMETER = (0.4, 0.7)
_CENTER_JITTER = 0.05


def _video_id(label: int, index: int) -> str:
    return f"{'fake' if label == LABEL_FAKE else 'real'}_{index:04d}"


def _video_rng(seed: int, label: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(label), int(index)]))


def _render_frame(
    grid: Tuple[np.ndarray, np.ndarray],
    *,
    center: Tuple[float, float],
    radius: float,
    wave: Tuple[float, float],
    phase: float,
    tint: np.ndarray,
    contrast: float,
    background: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    xx, yy = grid
    kx, ky = wave
    dist = np.hypot(xx - center[0], yy - center[1])
    # 1 px breite Kante, damit Radiusänderungen unterhalb eines Pixels sichtbar bleiben
    alpha = np.clip(radius - dist + 0.5, 0.0, 1.0)
    texture = 0.5 + contrast * np.sin(kx * xx + ky * yy + phase)
    disc = texture[:, :, None] * tint[None, None, :]
    image = alpha[:, :, None] * disc + (1.0 - alpha[:, :, None]) * background
    mask = (dist <= radius).astype(np.uint8) * 255
    return np.clip(image, 0.0, 1.0), mask


def _encode_png(path: Path, rgb: np.ndarray, jpeg_quality: Union[int, None]) -> None:
    bgr = cv2.cvtColor((rgb * 255.0 + 0.5).astype(np.uint8), cv2.COLOR_RGB2BGR)
    if jpeg_quality is not None:
        ok, buffer = cv2.imencode(".jpg", bgr, [cv2.IMWRITE_JPEG_QUALITY, int(jpeg_quality)])
        if not ok:
            raise DataLoadError(f"JPEG-Kodierung fehlgeschlagen: {path}")
        bgr = cv2.imdecode(buffer, cv2.IMREAD_COLOR)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), bgr):
        raise DataLoadError(f"Frame konnte nicht geschrieben werden: {path}")


def _write_mask(path: Path, mask: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), mask):
        raise DataLoadError(f"Maske konnte nicht geschrieben werden: {path}")


def _generate_video(
    cfg: SynthConfig,
    root: Path,
    label: int,
    index: int,
    grid: Tuple[np.ndarray, np.ndarray],
) -> List[Tuple[str, int, np.ndarray]]:
    rng = _video_rng(cfg.seed, label, index)
    video_id = _video_id(label, index)
    size = cfg.image_size

    center = (
        size / 2.0 + rng.uniform(-_CENTER_JITTER, _CENTER_JITTER) * size,
        size / 2.0 + rng.uniform(-_CENTER_JITTER, _CENTER_JITTER) * size,
    )
    base_radius = cfg.disc_radius_fraction * size
    freq = rng.uniform(*_PERIODS_PER_DIAMETER) / (2.0 * base_radius)
    theta = rng.uniform(0.0, math.pi)
    wave = (2.0 * math.pi * freq * math.cos(theta), 2.0 * math.pi * freq * math.sin(theta))
    tint = rng.uniform(0.8, 1.0, size=3)
    phase0 = rng.uniform(0.0, 2.0 * math.pi)
    fixed_offset = rng.uniform(-cfg.flicker_amplitude, cfg.flicker_amplitude)

    landmarks: List[Tuple[str, int, np.ndarray]] = []
    for t in range(cfg.frames_per_video):
        if label == LABEL_REAL:
            phase = phase0 + cfg.drift_rate * t
            offset = fixed_offset
        else:
            phase = rng.uniform(0.0, 2.0 * math.pi)
            offset = rng.uniform(-cfg.flicker_amplitude, cfg.flicker_amplitude)
        background = np.clip(rng.normal(0.5, cfg.noise_std, size=(size, size, 3)), 0.0, 1.0)
        radius = max(1.0, base_radius + offset)
        image, mask = _render_frame(
            grid,
            center=center,
            radius=radius,
            wave=wave,
            phase=phase,
            tint=tint,
            contrast=cfg.texture_contrast,
            background=background,
        )
        _encode_png(frame_path(root, label, video_id, t), image, cfg.jpeg_quality)
        _write_mask(mask_path(root, video_id, t), mask)
        landmarks.append((video_id, t, frontal_face_layout(center, 2.0 * base_radius * _DISC_TO_FACE)))
    return landmarks


def synth_generate(cfg: SynthConfig, out: Union[str, Path]) -> Path:
    """Schreibt den Benchmark nach `out`; verweigert ein nicht leeres Zielverzeichnis."""
    root = Path(out)
    if root.exists():
        if not root.is_dir() or any(root.iterdir()):
            raise OutputExistsError(f"Zielverzeichnis ist nicht leer: {root}")
    root.mkdir(parents=True, exist_ok=True)

    size = cfg.image_size
    coords = np.arange(size, dtype=np.float64)
    grid = np.meshgrid(coords, coords)

    all_landmarks: List[Tuple[str, int, np.ndarray]] = []
    manifest: Dict[str, object] = {}
    for label in sorted(LABEL_DIRS.values()):
        ids = [_video_id(label, i) for i in range(cfg.n_videos_per_class)]
        for index in range(cfg.n_videos_per_class):
            all_landmarks.extend(_generate_video(cfg, root, label, index, grid))
        for video_id, split in stratified_splits(ids, cfg.split_fractions).items():
            manifest[video_id] = split if label == LABEL_REAL else {"split": split, "manipulation": SYNTH_MANIPULATION}
        logger.info("Synthetik: %s Videos der Klasse %s geschrieben.", len(ids), label)

    write_landmark_file(landmark_file_path(root), all_landmarks)
    write_json_atomic(splits_path(root), manifest)
    write_json_atomic(root / SYNTH_INFO_FILENAME, json.loads(cfg.model_dump_json()))
    logger.info(
        "Synthetischer Datensatz unter %s: %s Videos, %s Frames.",
        root,
        2 * cfg.n_videos_per_class,
        len(all_landmarks),
    )
    return root
