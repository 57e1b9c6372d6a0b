"""Face-Tubelets: zeitlich geordnete, ausgerichtete Gesichtsausschnitte.

Landmarkendatei (JSON Lines), eine Zeile pro Frame:
    {"video_id": "v001", "frame_index": 0, "points": [[x, y], ... 68 Punkte]}
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import cv2
import numpy as np

from ..errors import DataLoadError, DetektorError, InvalidInputError, with_frame_index
from ..models import (
    CROP_SIZE,
    NUM_DENSE_LANDMARKS,
    NUM_SPARSE_LANDMARKS,
    AlignmentMode,
    FaceCrop,
    LandmarkSet,
    ReferenceTemplate,
    SampleDescriptor,
    Tubelet,
)
from .alignment import (
    DEFAULT_MASK_MARGIN,
    crop_from_mask,
    estimate_similarity,
    resize_full_frame,
    select_landmarks,
    warp_crop,
)
from .dataset import frame_path, landmark_file_path, mask_path

logger = logging.getLogger(__name__)

LandmarkKey = Tuple[str, int]
Annotation = Union[LandmarkSet, np.ndarray, None]


def _as_landmark_set(annotation: Annotation) -> LandmarkSet:
    if isinstance(annotation, LandmarkSet):
        return annotation
    if annotation is None:
        raise InvalidInputError("Landmarken fehlen für diesen Frame.")
    points = np.asarray(annotation, dtype=np.float64)
    if points.ndim == 2 and points.shape[0] == NUM_DENSE_LANDMARKS:
        return select_landmarks(points)
    if points.ndim == 2 and points.shape[0] == NUM_SPARSE_LANDMARKS:
        return LandmarkSet(points=points)
    raise InvalidInputError(f"Landmarken mit unerwarteter Form {points.shape}.")


def align_frame(
    frame: np.ndarray,
    annotation: Annotation,
    mode: AlignmentMode,
    *,
    template: ReferenceTemplate,
    margin: float = DEFAULT_MASK_MARGIN,
    source_frame_index: int = 0,
) -> FaceCrop:
    crop_size = template.crop_size
    if mode is AlignmentMode.LANDMARK:
        transform = estimate_similarity(_as_landmark_set(annotation), template)
        return warp_crop(frame, transform, crop_size=crop_size, source_frame_index=source_frame_index)
    if mode is AlignmentMode.MASK_BBOX:
        if annotation is None:
            raise InvalidInputError("Maske fehlt für diesen Frame.")
        return crop_from_mask(
            frame,
            np.asarray(annotation),
            margin=margin,
            crop_size=crop_size,
            source_frame_index=source_frame_index,
        )
    return resize_full_frame(frame, crop_size=crop_size, source_frame_index=source_frame_index)


def build_tubelet(
    frames: Sequence[np.ndarray],
    annotations: Sequence[Annotation],
    mode: Union[AlignmentMode, str],
    T: int,
    label: int,
    *,
    video_id: str = "",
    frame_indices: Optional[Sequence[int]] = None,
    template: Optional[ReferenceTemplate] = None,
    crop_size: int = CROP_SIZE,
    margin: float = DEFAULT_MASK_MARGIN,
) -> Tubelet:
    alignment = mode if isinstance(mode, AlignmentMode) else AlignmentMode.from_config(mode)
    if len(frames) != T:
        raise InvalidInputError(f"Erwartet {T} Frames, erhalten {len(frames)}.")
    if alignment is not AlignmentMode.NONE and len(annotations) != T:
        raise InvalidInputError(f"Erwartet {T} Annotationen, erhalten {len(annotations)}.")
    indices = list(frame_indices) if frame_indices is not None else list(range(T))
    ref = (template or ReferenceTemplate.default()).scaled(crop_size)

    crops: List[FaceCrop] = []
    for position, frame in enumerate(frames):
        annotation = annotations[position] if position < len(annotations) else None
        frame_index = indices[position]
        try:
            crops.append(
                align_frame(
                    frame,
                    annotation,
                    alignment,
                    template=ref,
                    margin=margin,
                    source_frame_index=frame_index,
                )
            )
        except DetektorError as exc:
            raise with_frame_index(exc, frame_index) from exc
    return Tubelet(crops=tuple(crops), video_id=video_id, frame_indices=tuple(indices), label=label)


def parse_landmark_line(line: str) -> Optional[Tuple[str, int, np.ndarray]]:
    """Parst eine Zeile der Landmarkendatei; None bei Fehlern."""
    try:
        if not line.strip():
            return None
        payload = json.loads(line)
        video_id = str(payload["video_id"]).strip()
        frame_index = int(payload["frame_index"])
        points = np.asarray(payload["points"], dtype=np.float64)
        if not video_id or frame_index < 0:
            return None
        if points.shape != (NUM_DENSE_LANDMARKS, 2) or not np.all(np.isfinite(points)):
            return None
        return video_id, frame_index, points
    except (ValueError, KeyError, TypeError):
        return None


def import_landmark_file(path: Union[str, Path]) -> Tuple[Dict[LandmarkKey, np.ndarray], Dict[str, Any]]:
    """Liest eine Landmarkendatei.

    Returns:
        (landmarks, stats) mit stats = {"processed", "imported", "errors", "error_line_examples"}
    """
    stats: Dict[str, Any] = {
        "processed": 0,
        "imported": 0,
        "errors": 0,
        "error_line_examples": [],
    }
    landmarks: Dict[LandmarkKey, np.ndarray] = {}
    try:
        with open(path, "r", encoding="utf-8-sig") as f:
            for line_num, line in enumerate(f, 1):
                if not line.strip():
                    continue
                stats["processed"] += 1
                result = parse_landmark_line(line)
                if not result:
                    stats["errors"] += 1
                    if len(stats["error_line_examples"]) < 5:
                        stats["error_line_examples"].append(line_num)
                    continue
                video_id, frame_index, points = result
                landmarks[(video_id, frame_index)] = points
                stats["imported"] += 1
    except FileNotFoundError as exc:
        raise DataLoadError(f"Landmarkendatei nicht gefunden: {path}") from exc

    if stats["errors"]:
        logger.warning(
            "Landmarkendatei %s: %s fehlerhafte Zeilen (z.B. Zeilen %s).",
            path,
            stats["errors"],
            stats["error_line_examples"],
        )
    return landmarks, stats


def write_landmark_file(path: Union[str, Path], records: Iterable[Tuple[str, int, np.ndarray]]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for video_id, frame_index, points in records:
            row = {
                "video_id": video_id,
                "frame_index": int(frame_index),
                "points": [[round(float(x), 4), round(float(y), 4)] for x, y in np.asarray(points)],
            }
            f.write(json.dumps(row, separators=(",", ":")) + "\n")
            count += 1
    return count


def read_frame(path: Union[str, Path]) -> np.ndarray:
    image = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if image is None:
        raise DataLoadError(f"Frame nicht lesbar: {path}")
    return cv2.cvtColor(image, cv2.COLOR_BGR2RGB)


def read_mask(path: Union[str, Path]) -> np.ndarray:
    mask = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if mask is None:
        raise DataLoadError(f"Maske nicht lesbar: {path}")
    return mask


def load_tubelet(
    root: Union[str, Path],
    descriptor: SampleDescriptor,
    mode: Union[AlignmentMode, str],
    *,
    landmarks: Optional[Mapping[LandmarkKey, np.ndarray]] = None,
    template: Optional[ReferenceTemplate] = None,
    crop_size: int = CROP_SIZE,
    margin: float = DEFAULT_MASK_MARGIN,
) -> Tubelet:
    """Liest die Frames eines Fensters von der Platte und baut das Tubelet."""
    alignment = mode if isinstance(mode, AlignmentMode) else AlignmentMode.from_config(mode)
    root_path = Path(root)
    frames = [read_frame(frame_path(root_path, descriptor.label, descriptor.video_id, idx)) for idx in descriptor.frame_indices]

    annotations: List[Annotation] = []
    if alignment is AlignmentMode.LANDMARK:
        if landmarks is None:
            landmarks, _ = import_landmark_file(landmark_file_path(root_path))
        for idx in descriptor.frame_indices:
            points = landmarks.get((descriptor.video_id, idx))
            if points is None:
                raise DataLoadError(f"{descriptor.sample_id}: keine Landmarken für Frame {idx}.")
            annotations.append(points)
    elif alignment is AlignmentMode.MASK_BBOX:
        annotations = [read_mask(mask_path(root_path, descriptor.video_id, idx)) for idx in descriptor.frame_indices]

    return build_tubelet(
        frames,
        annotations,
        alignment,
        descriptor.T,
        descriptor.label,
        video_id=descriptor.video_id,
        frame_indices=descriptor.frame_indices,
        template=template,
        crop_size=crop_size,
        margin=margin,
    )
