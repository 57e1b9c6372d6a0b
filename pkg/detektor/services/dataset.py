"""Indexierung von real/fake-Videos in Fenster fester Länge und Batch-Laden aus dem Crop-Cache.

Layout:
    root/{real,fake}/<video_id>/frame_%06d.png
    root/splits.json                    video_id -> "train" | "val" | "test"
                                        oder video_id -> {"split": ..., "manipulation": ...}
    root/masks/<video_id>/frame_%06d.png   optional
    root/landmarks.jsonl                   optional
"""
from __future__ import annotations

import hashlib
import json
import logging
import re
from collections import defaultdict
from pathlib import Path
from typing import Any, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from ..errors import DataLoadError
from ..models import LABEL_DIRS, LABEL_FAKE, LABEL_REAL, SPLITS, SampleDescriptor
from ..storage import has_cached, read_cached_tubelet

logger = logging.getLogger(__name__)

SPLITS_FILENAME = "splits.json"
LANDMARKS_FILENAME = "landmarks.jsonl"
MASKS_DIRNAME = "masks"
FRAME_PATTERN = re.compile(r"^frame_(\d{6})\.png$")
MANIPULATIONS = {"deepfake", "face2face", "faceswap", "synthetic", "none"}

DEFAULT_MEAN: Tuple[float, float, float] = (0.5, 0.5, 0.5)
DEFAULT_STD: Tuple[float, float, float] = (0.5, 0.5, 0.5)

PathLike = Union[str, Path]


def _label_dir(label: int) -> str:
    return "fake" if label == LABEL_FAKE else "real"


def frame_filename(frame_index: int) -> str:
    return f"frame_{frame_index:06d}.png"


def frame_path(root: PathLike, label: int, video_id: str, frame_index: int) -> Path:
    return Path(root) / _label_dir(label) / video_id / frame_filename(frame_index)


def mask_path(root: PathLike, video_id: str, frame_index: int) -> Path:
    return Path(root) / MASKS_DIRNAME / video_id / frame_filename(frame_index)


def landmark_file_path(root: PathLike) -> Path:
    return Path(root) / LANDMARKS_FILENAME


def splits_path(root: PathLike) -> Path:
    return Path(root) / SPLITS_FILENAME


def list_frame_indices(video_dir: Path) -> List[int]:
    indices = []
    for entry in video_dir.iterdir():
        match = FRAME_PATTERN.match(entry.name)
        if match and entry.is_file():
            indices.append(int(match.group(1)))
    return sorted(indices)


def read_split_manifest(root: PathLike) -> Dict[str, Dict[str, Optional[str]]]:
    path = splits_path(root)
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except FileNotFoundError as exc:
        raise DataLoadError(f"Split-Manifest fehlt: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataLoadError(f"Split-Manifest ist kein gültiges JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise DataLoadError("Split-Manifest muss ein JSON-Objekt sein.")

    manifest: Dict[str, Dict[str, Optional[str]]] = {}
    for video_id, value in payload.items():
        if isinstance(value, str):
            entry = {"split": value, "manipulation": None}
        elif isinstance(value, dict):
            entry = {"split": value.get("split"), "manipulation": value.get("manipulation")}
        else:
            raise DataLoadError(f"Ungültiger Manifest-Eintrag für {video_id}.")
        if entry["split"] not in SPLITS:
            raise DataLoadError(f"Unbekannter Split {entry['split']!r} für {video_id}.")
        if entry["manipulation"] is not None and entry["manipulation"] not in MANIPULATIONS:
            raise DataLoadError(f"Unbekannte Manipulation {entry['manipulation']!r} für {video_id}.")
        manifest[str(video_id)] = entry
    return manifest


def window_starts(num_frames: int, T: int, stride: int) -> List[int]:
    if num_frames < T:
        return []
    return list(range(0, num_frames - T + 1, stride))


def index_dataset(
    root: PathLike,
    T: int,
    stride: int,
    *,
    default_manipulation: str = "synthetic",
    manipulation: Optional[str] = None,
) -> List[SampleDescriptor]:
    """Alle zusammenhängenden T-Frame-Fenster mit Startposition ≡ 0 (mod stride), pro Video.

    Die Startposition zählt in der sortierten Liste vorhandener Frames. Fenster, deren
    Frame-Indizes nicht lückenlos aufeinander folgen, entfallen.
    """
    if T < 1 or stride < 1:
        raise DataLoadError(f"T und stride müssen >= 1 sein (T={T}, stride={stride}).")
    root_path = Path(root)
    manifest = read_split_manifest(root_path)

    descriptors: List[SampleDescriptor] = []
    for label_name, label in sorted(LABEL_DIRS.items(), key=lambda item: item[1]):
        label_dir = root_path / label_name
        if not label_dir.is_dir():
            logger.warning("Verzeichnis %s fehlt, keine %s-Videos.", label_dir, label_name)
            continue
        for video_dir in sorted(p for p in label_dir.iterdir() if p.is_dir()):
            video_id = video_dir.name
            entry = manifest.get(video_id)
            if entry is None:
                logger.warning("Video %s fehlt im Split-Manifest und wird übersprungen.", video_id)
                continue
            kind = "none" if label == LABEL_REAL else (entry["manipulation"] or default_manipulation)
            if manipulation is not None and label == LABEL_FAKE and kind != manipulation:
                continue
            frames = list_frame_indices(video_dir)
            if len(frames) < T:
                logger.warning("Video %s hat nur %s Frames (< T=%s) und wird übersprungen.", video_id, len(frames), T)
                continue
            gaps = 0
            for start in window_starts(len(frames), T, stride):
                window = frames[start:start + T]
                if window[-1] - window[0] != T - 1:
                    gaps += 1
                    continue
                descriptors.append(
                    SampleDescriptor(
                        video_id=video_id,
                        frame_indices=tuple(window),
                        label=label,
                        split=str(entry["split"]),
                        manipulation=kind,
                    )
                )
            if gaps:
                logger.warning("Video %s: %s Fenster mit Lücke in der Frame-Nummerierung übersprungen.", video_id, gaps)
    check_split_hygiene(descriptors)
    logger.info("Index %s: %s Fenster (T=%s, stride=%s).", root_path, len(descriptors), T, stride)
    return descriptors


def check_split_hygiene(descriptors: Sequence[SampleDescriptor]) -> None:
    splits_by_video: Dict[str, set] = defaultdict(set)
    for d in descriptors:
        splits_by_video[d.video_id].add(d.split)
    leaking = sorted(video for video, splits in splits_by_video.items() if len(splits) > 1)
    if leaking:
        raise DataLoadError("Videos in mehreren Splits: " + ", ".join(leaking[:8]))


def filter_split(descriptors: Sequence[SampleDescriptor], split: str) -> List[SampleDescriptor]:
    return [d for d in descriptors if d.split == split]


def count_by_split_and_label(descriptors: Sequence[SampleDescriptor]) -> Dict[str, Dict[int, int]]:
    counts: Dict[str, Dict[int, int]] = {split: {LABEL_REAL: 0, LABEL_FAKE: 0} for split in SPLITS}
    for d in descriptors:
        counts[d.split][d.label] += 1
    return counts


def _rank_token(video_id: str) -> int:
    digest = hashlib.blake2b(video_id.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def stratified_splits(video_ids: Sequence[str], fractions: Sequence[float]) -> Dict[str, str]:
    """Deterministische Aufteilung nach Hash-Rang; bei >= 3 Videos ist jeder Split belegt."""
    ordered = sorted(video_ids, key=lambda vid: (_rank_token(vid), vid))
    n = len(ordered)
    counts = [int(round(n * f)) for f in fractions[:2]]
    if n >= 3:
        counts = [max(1, c) for c in counts]
        while sum(counts) > n - 1:
            idx = 0 if counts[0] >= counts[1] else 1
            counts[idx] -= 1
    n_train, n_val = counts
    assignment: Dict[str, str] = {}
    for position, video_id in enumerate(ordered):
        if position < n_train:
            assignment[video_id] = "train"
        elif position < n_train + n_val:
            assignment[video_id] = "val"
        else:
            assignment[video_id] = "test"
    return assignment


def balance_labels(descriptors: Sequence[SampleDescriptor], seed: int) -> List[SampleDescriptor]:
    """Überabtastung der kleineren Klasse, damit Batches im Erwartungswert ausgeglichen sind."""
    by_label: Dict[int, List[SampleDescriptor]] = {LABEL_REAL: [], LABEL_FAKE: []}
    for d in descriptors:
        by_label[d.label].append(d)
    if not by_label[LABEL_REAL] or not by_label[LABEL_FAKE]:
        return list(descriptors)
    target = max(len(v) for v in by_label.values())
    rng = np.random.default_rng(seed)
    balanced: List[SampleDescriptor] = []
    for label in (LABEL_REAL, LABEL_FAKE):
        group = by_label[label]
        balanced.extend(group)
        missing = target - len(group)
        if missing > 0:
            picks = rng.choice(len(group), size=missing, replace=True)
            balanced.extend(group[int(i)] for i in picks)
    return balanced


class Batch(NamedTuple):
    images: torch.Tensor
    labels: torch.Tensor
    sample_ids: List[str]


class TubeletDataset(Dataset):
    """Liest gecachte Tubelets (T x H x W x 3) und normalisiert pro Kanal."""

    def __init__(
        self,
        descriptors: Sequence[SampleDescriptor],
        cache_dir: PathLike,
        *,
        mean: Sequence[float] = DEFAULT_MEAN,
        std: Sequence[float] = DEFAULT_STD,
    ) -> None:
        self.descriptors = list(descriptors)
        self.cache_dir = Path(cache_dir)
        self.mean = np.asarray(mean, dtype=np.float32)
        self.std = np.asarray(std, dtype=np.float32)

    def __len__(self) -> int:
        return len(self.descriptors)

    def __getitem__(self, index: int) -> Tuple[torch.Tensor, torch.Tensor, int]:
        descriptor = self.descriptors[index]
        array = read_cached_tubelet(self.cache_dir, descriptor)
        normalized = (array - self.mean) / self.std
        return (
            torch.from_numpy(np.ascontiguousarray(normalized, dtype=np.float32)),
            torch.tensor(float(descriptor.label), dtype=torch.float32),
            index,
        )


def load_batch(
    descriptors: Sequence[SampleDescriptor],
    cache: PathLike,
    batch_size: int,
    shuffle_seed: Optional[int] = None,
    *,
    mean: Sequence[float] = DEFAULT_MEAN,
    std: Sequence[float] = DEFAULT_STD,
    num_workers: int = 0,
) -> Iterator[Batch]:
    """Batches in seed-bestimmter Reihenfolge; der letzte Teil-Batch wird mitgeliefert."""
    if batch_size < 1:
        raise DataLoadError("batch_size muss >= 1 sein.")
    missing = [d.sample_id for d in descriptors if not has_cached(cache, d)]
    if missing:
        raise DataLoadError(f"Cache-Eintrag fehlt für {missing[0]} ({len(missing)} insgesamt).")

    dataset = TubeletDataset(descriptors, cache, mean=mean, std=std)
    generator = None
    if shuffle_seed is not None:
        generator = torch.Generator()
        generator.manual_seed(int(shuffle_seed))
    loader = DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=shuffle_seed is not None,
        generator=generator,
        num_workers=num_workers,
        drop_last=False,
    )
    for images, labels, indices in loader:
        yield Batch(
            images=images,
            labels=labels,
            sample_ids=[dataset.descriptors[int(i)].sample_id for i in indices],
        )
