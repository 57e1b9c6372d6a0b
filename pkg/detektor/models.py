from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidInputError

Split = Literal["train", "val", "test"]
Manipulation = Literal["deepfake", "face2face", "faceswap", "synthetic", "none"]

SPLITS: Tuple[str, ...] = ("train", "val", "test")
LABEL_REAL = 0
LABEL_FAKE = 1
LABEL_DIRS: Dict[str, int] = {"real": LABEL_REAL, "fake": LABEL_FAKE}

CROP_SIZE = 224
NUM_SPARSE_LANDMARKS = 7
NUM_DENSE_LANDMARKS = 68

# Reihenfolge: linkes Auge außen/innen, rechtes Auge innen/außen, Nasenspitze, Mundwinkel links/rechts
DENSE_TO_SPARSE_INDICES: Tuple[int, ...] = (36, 39, 42, 45, 30, 48, 54)

# Lockerer Ausschnitt: Stirn und Kinn bleiben im Bild
DEFAULT_TEMPLATE_POINTS: Tuple[Tuple[float, float], ...] = (
    (67.2, 89.6),
    (95.2, 89.6),
    (128.8, 89.6),
    (156.8, 89.6),
    (112.0, 128.8),
    (81.6, 156.8),
    (142.4, 156.8),
)

# Spiegelpaare bezüglich der vertikalen Mittellinie; die Nasenspitze liegt auf ihr.
_MIRROR_PAIRS: Tuple[Tuple[int, int], ...] = ((0, 3), (1, 2), (5, 6), (4, 4))


class AlignmentMode(str, Enum):
    LANDMARK = "landmark"
    MASK_BBOX = "mask_bbox"
    NONE = "none"

    @classmethod
    def from_config(cls, value: str) -> "AlignmentMode":
        mapping = {"landmark": cls.LANDMARK, "mask": cls.MASK_BBOX, "mask_bbox": cls.MASK_BBOX, "none": cls.NONE}
        try:
            return mapping[value]
        except KeyError as exc:
            raise InvalidInputError(f"Unbekannter Ausrichtungsmodus: {value!r}") from exc


def _as_points(raw: Any, expected: int, what: str) -> np.ndarray:
    points = np.array(raw, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise InvalidInputError(f"{what}: erwartet ({expected}, 2)-Punkte, erhalten Form {points.shape}.")
    if points.shape[0] != expected:
        raise InvalidInputError(f"{what}: erwartet {expected} Punkte, erhalten {points.shape[0]}.")
    if not np.all(np.isfinite(points)):
        raise InvalidInputError(f"{what}: Koordinaten müssen endlich sein.")
    points.setflags(write=False)
    return points


@dataclass(frozen=True)
class LandmarkSet:
    """Sieben Gesichtspunkte in Frame-Pixelkoordinaten."""

    points: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "points", _as_points(self.points, NUM_SPARSE_LANDMARKS, "LandmarkSet"))


@dataclass(frozen=True)
class ReferenceTemplate:
    points: np.ndarray
    crop_size: int = CROP_SIZE

    def __post_init__(self) -> None:
        points = _as_points(self.points, NUM_SPARSE_LANDMARKS, "ReferenceTemplate")
        size = float(self.crop_size)
        if self.crop_size <= 0:
            raise InvalidInputError("ReferenceTemplate: crop_size muss positiv sein.")
        if np.any(points < 0.0) or np.any(points >= size):
            raise InvalidInputError("ReferenceTemplate: alle Punkte müssen innerhalb des Ausschnitts liegen.")
        mid = size / 2.0
        for left, right in _MIRROR_PAIRS:
            if abs((points[left, 0] - mid) + (points[right, 0] - mid)) > 1e-9 or abs(points[left, 1] - points[right, 1]) > 1e-9:
                raise InvalidInputError("ReferenceTemplate: Punkte müssen symmetrisch zur Mittellinie liegen.")
        if not (points[0, 0] < points[1, 0] < points[2, 0] < points[3, 0]):
            raise InvalidInputError("ReferenceTemplate: Augenwinkel müssen von links nach rechts geordnet sein.")
        object.__setattr__(self, "points", points)

    @classmethod
    def default(cls) -> "ReferenceTemplate":
        return cls(points=np.array(DEFAULT_TEMPLATE_POINTS), crop_size=CROP_SIZE)

    def scaled(self, crop_size: int) -> "ReferenceTemplate":
        if crop_size == self.crop_size:
            return self
        factor = crop_size / float(self.crop_size)
        return ReferenceTemplate(points=self.points * factor, crop_size=crop_size)


def _wrap_angle(theta: float) -> float:
    # Abbildung nach (-pi, pi]
    wrapped = math.atan2(math.sin(theta), math.cos(theta))
    if wrapped <= -math.pi:
        wrapped = math.pi
    return wrapped


@dataclass(frozen=True)
class SimilarityTransform:
    """4-DOF transform: isotropic scale, in-plane rotation and 2D translation.

    Matrix form: [[s*cos, -s*sin, tx], [s*sin, s*cos, ty]].
    """

    scale: float
    rotation: float
    tx: float
    ty: float

    def __post_init__(self) -> None:
        values = (self.scale, self.rotation, self.tx, self.ty)
        if not all(math.isfinite(v) for v in values):
            raise InvalidInputError("SimilarityTransform: Parameter müssen endlich sein.")
        if self.scale <= 0.0:
            raise InvalidInputError(f"SimilarityTransform: Skalierung muss positiv sein ({self.scale}).")
        if not (-math.pi < self.rotation <= math.pi):
            object.__setattr__(self, "rotation", _wrap_angle(self.rotation))

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(scale=1.0, rotation=0.0, tx=0.0, ty=0.0)

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty], dtype=np.float64)

    def matrix(self) -> np.ndarray:
        c = self.scale * math.cos(self.rotation)
        s = self.scale * math.sin(self.rotation)
        return np.array([[c, -s, self.tx], [s, c, self.ty]], dtype=np.float64)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "SimilarityTransform":
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise InvalidInputError(f"Erwartet 2x3-Matrix, erhalten {m.shape}.")
        if not np.allclose([m[0, 0], m[0, 1]], [m[1, 1], -m[1, 0]], rtol=0.0, atol=1e-9 * max(1.0, abs(m[0, 0]) + abs(m[1, 0]))):
            raise InvalidInputError("Matrix ist keine Ähnlichkeitstransformation.")
        scale = math.hypot(m[0, 0], m[1, 0])
        rotation = math.atan2(m[1, 0], m[0, 0])
        return cls(scale=scale, rotation=rotation, tx=float(m[0, 2]), ty=float(m[1, 2]))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        m = self.matrix()
        return pts @ m[:, :2].T + m[:, 2]

    def inverse(self) -> "SimilarityTransform":
        inv_scale = 1.0 / self.scale
        c = math.cos(-self.rotation)
        s = math.sin(-self.rotation)
        tx = -inv_scale * (c * self.tx - s * self.ty)
        ty = -inv_scale * (s * self.tx + c * self.ty)
        return SimilarityTransform(scale=inv_scale, rotation=-self.rotation, tx=tx, ty=ty)

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """self after other, i.e. x -> self(other(x))."""
        c = math.cos(self.rotation)
        s = math.sin(self.rotation)
        tx = self.scale * (c * other.tx - s * other.ty) + self.tx
        ty = self.scale * (s * other.tx + c * other.ty) + self.ty
        return SimilarityTransform(
            scale=self.scale * other.scale,
            rotation=self.rotation + other.rotation,
            tx=tx,
            ty=ty,
        )


@dataclass(frozen=True)
class FaceCrop:
    image: np.ndarray
    source_frame_index: int
    alignment_mode: AlignmentMode

    def __post_init__(self) -> None:
        image = np.asarray(self.image)
        if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] != image.shape[1]:
            raise InvalidInputError(f"FaceCrop: erwartet quadratisches HxWx3-Bild, erhalten {image.shape}.")
        if image.size and (float(image.min()) < 0.0 or float(image.max()) > 1.0):
            raise InvalidInputError("FaceCrop: Pixelwerte müssen in [0, 1] liegen.")
        object.__setattr__(self, "alignment_mode", AlignmentMode(self.alignment_mode))

    @property
    def size(self) -> int:
        return int(self.image.shape[0])


@dataclass(frozen=True)
class Tubelet:
    crops: Tuple[FaceCrop, ...]
    video_id: str
    frame_indices: Tuple[int, ...]
    label: int

    def __post_init__(self) -> None:
        crops = tuple(self.crops)
        indices = tuple(int(i) for i in self.frame_indices)
        if not crops:
            raise InvalidInputError("Tubelet: mindestens ein Ausschnitt erforderlich.")
        if len(crops) != len(indices):
            raise InvalidInputError(
                f"Tubelet: {len(crops)} Ausschnitte, aber {len(indices)} Frame-Indizes."
            )
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise InvalidInputError("Tubelet: Frame-Indizes müssen streng steigend sein.")
        if len({crop.alignment_mode for crop in crops}) != 1:
            raise InvalidInputError("Tubelet: alle Ausschnitte brauchen denselben Ausrichtungsmodus.")
        if len({crop.size for crop in crops}) != 1:
            raise InvalidInputError("Tubelet: alle Ausschnitte brauchen dieselbe Größe.")
        if self.label not in (LABEL_REAL, LABEL_FAKE):
            raise InvalidInputError(f"Tubelet: Label muss 0 oder 1 sein, erhalten {self.label!r}.")
        object.__setattr__(self, "crops", crops)
        object.__setattr__(self, "frame_indices", indices)

    @property
    def T(self) -> int:
        return len(self.crops)

    @property
    def alignment_mode(self) -> AlignmentMode:
        return self.crops[0].alignment_mode

    def as_array(self) -> np.ndarray:
        return np.stack([crop.image for crop in self.crops]).astype(np.float32, copy=False)


def make_sample_id(video_id: str, first_frame: int, length: int) -> str:
    return f"{video_id}__{first_frame:06d}_{length}"


def video_id_from_sample_id(sample_id: str) -> str:
    head, sep, _ = sample_id.rpartition("__")
    return head if sep else sample_id


@dataclass(frozen=True)
class SampleDescriptor:
    video_id: str
    frame_indices: Tuple[int, ...]
    label: int
    split: str
    manipulation: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "frame_indices", tuple(int(i) for i in self.frame_indices))
        if not self.frame_indices:
            raise InvalidInputError("SampleDescriptor: leeres Fenster.")
        if self.split not in SPLITS:
            raise InvalidInputError(f"SampleDescriptor: unbekannter Split {self.split!r}.")
        if self.label not in (LABEL_REAL, LABEL_FAKE):
            raise InvalidInputError(f"SampleDescriptor: Label muss 0 oder 1 sein, erhalten {self.label!r}.")

    @property
    def T(self) -> int:
        return len(self.frame_indices)

    @property
    def sample_id(self) -> str:
        return make_sample_id(self.video_id, self.frame_indices[0], self.T)


@dataclass(frozen=True)
class TrainLogRecord:
    epoch: int
    split: str
    loss: float
    accuracy: float
    wall_time: float
    stage: str = "end_to_end"

    def __post_init__(self) -> None:
        if not (self.loss >= 0.0):
            raise InvalidInputError(f"TrainLogRecord: Loss muss >= 0 sein ({self.loss}).")
        if not (0.0 <= self.accuracy <= 1.0):
            raise InvalidInputError(f"TrainLogRecord: Accuracy außerhalb [0, 1] ({self.accuracy}).")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "epoch": self.epoch,
            "split": self.split,
            "loss": self.loss,
            "accuracy": self.accuracy,
            "wall_time": self.wall_time,
            "stage": self.stage,
        }


@dataclass(frozen=True)
class ScoreEntry:
    sample_id: str
    score: float
    label: int


@dataclass
class ScoreMetadata:
    """Legendenfelder: Backbone, Frames, Ausrichtung, Richtung."""

    manipulation: str = "none"
    description: str = ""
    frames: Optional[int] = None
    variant: str = "plain"
    split: str = "test"
    aggregation: str = "window"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "manipulation": self.manipulation,
            "description": self.description,
            "frames": self.frames,
            "variant": self.variant,
            "split": self.split,
            "aggregation": self.aggregation,
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "ScoreMetadata":
        known = {key: payload[key] for key in cls().to_dict() if key in payload}
        return cls(**known)


@dataclass
class ScoreSet:
    entries: List[ScoreEntry]
    metadata: ScoreMetadata = field(default_factory=ScoreMetadata)

    def __post_init__(self) -> None:
        if not self.entries:
            raise InvalidInputError("ScoreSet darf nicht leer sein.")
        for entry in self.entries:
            if not math.isfinite(entry.score) or not (0.0 <= entry.score <= 1.0):
                raise InvalidInputError(f"Score von {entry.sample_id} liegt nicht in [0, 1]: {entry.score}")
            if entry.label not in (LABEL_REAL, LABEL_FAKE):
                raise InvalidInputError(f"Label von {entry.sample_id} muss 0 oder 1 sein.")

    @property
    def scores(self) -> np.ndarray:
        return np.array([e.score for e in self.entries], dtype=np.float64)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def has_both_classes(self) -> bool:
        return len(set(self.labels.tolist())) == 2


@dataclass
class EvalReport:
    accuracy: float
    auc: float
    average_precision: float
    roc_points: List[Tuple[float, float]]
    pr_points: List[Tuple[float, float]]
    threshold: float = 0.5
    metadata: ScoreMetadata = field(default_factory=ScoreMetadata)
    n_samples: int = 0

    def __post_init__(self) -> None:
        for name in ("accuracy", "auc", "average_precision"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise InvalidInputError(f"EvalReport.{name} außerhalb [0, 1]: {value}")
        if self.roc_points:
            if tuple(self.roc_points[0]) != (0.0, 0.0) or tuple(self.roc_points[-1]) != (1.0, 1.0):
                raise InvalidInputError("ROC-Kurve muss bei (0,0) beginnen und bei (1,1) enden.")
            xs = [p[0] for p in self.roc_points]
            ys = [p[1] for p in self.roc_points]
            if any(b < a for a, b in zip(xs, xs[1:])) or any(b < a for a, b in zip(ys, ys[1:])):
                raise InvalidInputError("ROC-Kurve muss monoton steigen.")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "auc": self.auc,
            "average_precision": self.average_precision,
            "roc_points": [list(p) for p in self.roc_points],
            "pr_points": [list(p) for p in self.pr_points],
            "threshold": self.threshold,
            "metadata": self.metadata.to_dict(),
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "EvalReport":
        return cls(
            accuracy=float(payload["accuracy"]),
            auc=float(payload["auc"]),
            average_precision=float(payload["average_precision"]),
            roc_points=[(float(x), float(y)) for x, y in payload.get("roc_points", [])],
            pr_points=[(float(x), float(y)) for x, y in payload.get("pr_points", [])],
            threshold=float(payload.get("threshold", 0.5)),
            metadata=ScoreMetadata.from_dict(payload.get("metadata", {})),
            n_samples=int(payload.get("n_samples", 0)),
        )


def ensure_points_sequence(raw: Sequence[Sequence[float]], expected: int, what: str) -> np.ndarray:
    return _as_points(raw, expected, what)
