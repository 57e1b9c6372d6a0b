"""Landmark-basierte Ausrichtung und maskenbasierte Ausschnitte.

Alle Funktionen sind rein und ohne gemeinsamen Zustand; sie dürfen parallel aufgerufen werden.
"""
from __future__ import annotations

import logging
import math
from typing import Tuple, Union

import cv2
import numpy as np
from scipy import ndimage

from ..errors import DegenerateConfigurationError, EmptyMaskError, InvalidInputError
from ..models import (
    CROP_SIZE,
    DENSE_TO_SPARSE_INDICES,
    NUM_DENSE_LANDMARKS,
    AlignmentMode,
    FaceCrop,
    LandmarkSet,
    ReferenceTemplate,
    SimilarityTransform,
    ensure_points_sequence,
)

logger = logging.getLogger(__name__)

DEFAULT_MASK_MARGIN = 0.3

PointsLike = Union[LandmarkSet, ReferenceTemplate, np.ndarray]


def _build_canonical_dense_layout() -> np.ndarray:
    """68-Punkte-Frontalgesicht im 224er-Referenzsystem, konsistent mit dem Template."""
    pts = np.zeros((NUM_DENSE_LANDMARKS, 2), dtype=np.float64)
    # Kinnlinie 0..16
    for i in range(17):
        a = math.pi * i / 16.0
        pts[i] = (112.0 - 72.0 * math.cos(a), 95.0 + 105.0 * math.sin(a))
    # Augenbrauen 17..26
    for i, x in enumerate(np.linspace(55.0, 100.0, 5)):
        pts[17 + i] = (x, 72.0 - 6.0 * math.sin(math.pi * i / 4.0))
        pts[26 - i] = (224.0 - x, 72.0 - 6.0 * math.sin(math.pi * i / 4.0))
    # Nasenrücken 27..30, Nasenflügel 31..35
    for i, y in enumerate(np.linspace(92.0, 128.8, 4)):
        pts[27 + i] = (112.0, y)
    for i, x in enumerate(np.linspace(95.0, 129.0, 5)):
        pts[31 + i] = (x, 136.0)
    left_eye = [(67.2, 89.6), (76.5, 84.0), (86.0, 84.0), (95.2, 89.6), (86.0, 94.0), (76.5, 94.0)]
    right_eye = [(128.8, 89.6), (138.0, 84.0), (147.5, 84.0), (156.8, 89.6), (147.5, 94.0), (138.0, 94.0)]
    pts[36:42] = left_eye
    pts[42:48] = right_eye
    mouth_outer = [
        (81.6, 156.8), (92.0, 150.0), (102.0, 147.0), (112.0, 148.0), (122.0, 147.0), (132.0, 150.0),
        (142.4, 156.8), (132.0, 164.0), (122.0, 168.0), (112.0, 169.0), (102.0, 168.0), (92.0, 164.0),
    ]
    mouth_inner = [
        (86.0, 157.0), (100.0, 153.0), (112.0, 153.0), (124.0, 153.0),
        (138.0, 157.0), (124.0, 161.0), (112.0, 162.0), (100.0, 161.0),
    ]
    pts[48:60] = mouth_outer
    pts[60:68] = mouth_inner
    pts.setflags(write=False)
    return pts


CANONICAL_DENSE_LAYOUT = _build_canonical_dense_layout()


def frontal_face_layout(center: Tuple[float, float], size: float, rotation: float = 0.0) -> np.ndarray:
    """Synthetisches 68-Punkte-Layout; `size` ist die Kantenlänge des äquivalenten Ausschnitts."""
    rel = (CANONICAL_DENSE_LAYOUT - CROP_SIZE / 2.0) * (size / CROP_SIZE)
    c, s = math.cos(rotation), math.sin(rotation)
    rotated = rel @ np.array([[c, s], [-s, c]])
    return rotated + np.asarray(center, dtype=np.float64)


def select_landmarks(dense: np.ndarray) -> LandmarkSet:
    points = ensure_points_sequence(dense, NUM_DENSE_LANDMARKS, "Dichte Landmarken")
    return LandmarkSet(points=points[list(DENSE_TO_SPARSE_INDICES)])


def _points_of(value: PointsLike) -> np.ndarray:
    if isinstance(value, (LandmarkSet, ReferenceTemplate)):
        return value.points
    return LandmarkSet(points=value).points


def estimate_similarity(src: PointsLike, ref: PointsLike) -> SimilarityTransform:
    """Least-squares similarity mapping src onto ref (Umeyama, isotropic scale, no reflection)."""
    source = _points_of(src)
    target = _points_of(ref)
    num = source.shape[0]

    src_mean = source.mean(axis=0)
    dst_mean = target.mean(axis=0)
    src_demean = source - src_mean
    dst_demean = target - dst_mean

    src_var = float((src_demean ** 2).sum()) / num
    scale_hint = max(1.0, float(np.abs(source).max()))
    if src_var <= (1e-12 * scale_hint) ** 2:
        raise DegenerateConfigurationError("Quellpunkte fallen zusammen (Varianz 0).")

    cov = dst_demean.T @ src_demean / num
    U, S, Vt = np.linalg.svd(cov)
    d = np.ones(2, dtype=np.float64)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        d[1] = -1.0
    rot = U @ np.diag(d) @ Vt
    scale = float((S * d).sum()) / src_var
    if not scale > 0.0:
        raise DegenerateConfigurationError("Keine positive Skalierung schätzbar.")
    translation = dst_mean - scale * (rot @ src_mean)
    return SimilarityTransform(
        scale=scale,
        rotation=math.atan2(rot[1, 0], rot[0, 0]),
        tx=float(translation[0]),
        ty=float(translation[1]),
    )


def alignment_residual(src: PointsLike, ref: PointsLike, transform: SimilarityTransform) -> float:
    diff = transform.apply(_points_of(src)) - _points_of(ref)
    return float((diff ** 2).sum())


def reprojection_rmse(src: PointsLike, ref: PointsLike, transform: SimilarityTransform) -> float:
    diff = transform.apply(_points_of(src)) - _points_of(ref)
    return float(np.sqrt((diff ** 2).sum(axis=1).mean()))


def to_unit_float(frame: np.ndarray) -> np.ndarray:
    image = np.asarray(frame)
    if image.size == 0:
        raise InvalidInputError("Leerer Frame.")
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidInputError(f"Erwartet HxWx3-Frame, erhalten {image.shape}.")
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    if image.dtype == np.uint16:
        return image.astype(np.float32) / 65535.0
    converted = image.astype(np.float32)
    if not np.all(np.isfinite(converted)):
        raise InvalidInputError("Frame enthält nicht-endliche Werte.")
    return np.clip(converted, 0.0, 1.0)


def warp_crop(
    frame: np.ndarray,
    transform: SimilarityTransform,
    *,
    crop_size: int = CROP_SIZE,
    source_frame_index: int = 0,
) -> FaceCrop:
    """Bilinearer Abgriff des Frames an transform^-1(x, y) für jedes Crop-Pixel (x, y).

    Abtastpositionen bleiben in float64 ungerundet; außerhalb des Frames gilt 0.
    """
    image = to_unit_float(frame)
    ys, xs = np.mgrid[0:crop_size, 0:crop_size].astype(np.float64)
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1)
    source = transform.inverse().apply(grid)
    coordinates = np.stack([source[:, 1], source[:, 0]])
    channels = [
        ndimage.map_coordinates(image[:, :, c], coordinates, order=1, mode="grid-constant", cval=0.0)
        for c in range(image.shape[2])
    ]
    warped = np.stack(channels, axis=1).reshape(crop_size, crop_size, image.shape[2])
    return FaceCrop(
        image=np.clip(warped, 0.0, 1.0).astype(np.float32),
        source_frame_index=source_frame_index,
        alignment_mode=AlignmentMode.LANDMARK,
    )


def _mask_2d(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim == 3:
        m = m[:, :, 0] if m.shape[2] == 1 else m.max(axis=2)
    if m.ndim != 2:
        raise InvalidInputError(f"Maske muss einkanalig sein, erhalten {np.asarray(mask).shape}.")
    return m != 0


def mask_crop_window(
    mask: np.ndarray,
    margin: float = DEFAULT_MASK_MARGIN,
) -> Tuple[int, int, int, int]:
    """(x0, y0, x1, y1) der erweiterten Bounding-Box, halboffen und an den Frame geklemmt."""
    m = _mask_2d(mask)
    ys, xs = np.nonzero(m)
    if xs.size == 0:
        raise EmptyMaskError("Maske enthält keinen Vordergrund.")
    height, width = m.shape
    x0, x1 = int(xs.min()), int(xs.max()) + 1
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    mx = margin * (x1 - x0)
    my = margin * (y1 - y0)
    wx0 = max(0, int(math.floor(x0 - mx + 0.5)))
    wx1 = min(width, int(math.floor(x1 + mx + 0.5)))
    wy0 = max(0, int(math.floor(y0 - my + 0.5)))
    wy1 = min(height, int(math.floor(y1 + my + 0.5)))
    return wx0, wy0, wx1, wy1


def crop_from_mask(
    frame: np.ndarray,
    mask: np.ndarray,
    *,
    margin: float = DEFAULT_MASK_MARGIN,
    crop_size: int = CROP_SIZE,
    source_frame_index: int = 0,
) -> FaceCrop:
    image = to_unit_float(frame)
    if np.asarray(mask).shape[:2] != image.shape[:2]:
        raise InvalidInputError(
            f"Maske {np.asarray(mask).shape[:2]} passt nicht zum Frame {image.shape[:2]}."
        )
    x0, y0, x1, y1 = mask_crop_window(mask, margin)
    window = np.ascontiguousarray(image[y0:y1, x0:x1])
    resized = cv2.resize(window, (crop_size, crop_size), interpolation=cv2.INTER_LINEAR)
    return FaceCrop(
        image=np.clip(resized, 0.0, 1.0),
        source_frame_index=source_frame_index,
        alignment_mode=AlignmentMode.MASK_BBOX,
    )


def resize_full_frame(
    frame: np.ndarray,
    *,
    crop_size: int = CROP_SIZE,
    source_frame_index: int = 0,
) -> FaceCrop:
    image = to_unit_float(frame)
    resized = cv2.resize(image, (crop_size, crop_size), interpolation=cv2.INTER_LINEAR)
    return FaceCrop(
        image=np.clip(resized, 0.0, 1.0),
        source_frame_index=source_frame_index,
        alignment_mode=AlignmentMode.NONE,
    )
