"""Geometry primitives, label algebra and annotation records."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class DiagnosisLabel(str, enum.Enum):
    """Image-level diagnosis: normal, benign or malignant."""

    N = "N"
    B = "B"
    M = "M"

    @property
    def index(self) -> int:
        return _LABEL_INDEX[self]

    @classmethod
    def from_index(cls, i: int) -> "DiagnosisLabel":
        return _INDEX_LABEL[int(i)]


_LABEL_INDEX = {DiagnosisLabel.N: 0, DiagnosisLabel.B: 1, DiagnosisLabel.M: 2}
_INDEX_LABEL = {v: k for k, v in _LABEL_INDEX.items()}


class RegionClass(enum.IntEnum):
    """Region-level class. ``BACKGROUND`` shares index 0 with label N."""

    BACKGROUND = 0
    BENIGN = 1
    MALIGNANT = 2

    def as_label(self) -> DiagnosisLabel:
        return DiagnosisLabel.from_index(int(self))


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in continuous pixel coordinates (no +1 correction)."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        for name in ("x_min", "y_min", "x_max", "y_max"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_tuple()}")
        if not all(np.isfinite(self.as_tuple())):
            raise ValueError(f"non-finite box {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def translate(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def within(self, width: float, height: float) -> bool:
        return (self.x_min >= 0 and self.y_min >= 0
                and self.x_max <= width and self.y_max <= height)

    def clip(self, width: float, height: float) -> "BBox | None":
        """Clip to ``[0, width] x [0, height]``; ``None`` if nothing is left."""
        x0, y0 = max(self.x_min, 0.0), max(self.y_min, 0.0)
        x1, y1 = min(self.x_max, float(width)), min(self.y_max, float(height))
        if x0 >= x1 or y0 >= y1:
            return None
        return BBox(x0, y0, x1, y1)

    @classmethod
    def from_array(cls, a) -> "BBox":
        a = [float(v) for v in a]
        return cls(a[0], a[1], a[2], a[3])


def _intersection(a: BBox, b: BBox) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union (Jaccard index) of two boxes."""
    inter = _intersection(a, b)
    return inter / (a.area + b.area - inter)


def overlap_fraction(proposal: BBox, reference: BBox) -> float:
    """Fraction of ``proposal``'s area that lies inside ``reference``."""
    return _intersection(proposal, reference) / proposal.area


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


@dataclass(frozen=True)
class RegionPrediction:
    """Candidate region with a (background, benign, malignant) distribution."""

    box: BBox
    probs: tuple[float, float, float]
    objectness: float = 1.0

    def __post_init__(self):
        probs = tuple(float(p) for p in self.probs)
        if len(probs) != 3:
            raise ValueError("probs must be a (p_N, p_B, p_M) triple")
        if any(p < -1e-9 or p > 1 + 1e-9 for p in probs):
            raise ValueError(f"probabilities out of range: {probs}")
        if abs(sum(probs) - 1.0) > 1e-6:
            raise ValueError(f"probabilities do not sum to 1: {probs}")
        if not 0.0 <= float(self.objectness) <= 1.0:
            raise ValueError(f"objectness out of range: {self.objectness}")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "objectness", float(self.objectness))

    @property
    def p_normal(self) -> float:
        return self.probs[0]

    @property
    def p_benign(self) -> float:
        return self.probs[1]

    @property
    def p_malignant(self) -> float:
        return self.probs[2]

    @property
    def mass_score(self) -> float:
        """Largest non-background probability."""
        return max(self.probs[1], self.probs[2])


@dataclass(frozen=True)
class StrongAnnotation:
    moi_box: BBox
    moi_label: DiagnosisLabel
    background_boxes: tuple[BBox, ...] = ()

    def __post_init__(self):
        label = DiagnosisLabel(self.moi_label)
        if label is DiagnosisLabel.N:
            raise ValueError("a strong annotation must mark a benign or malignant mass")
        object.__setattr__(self, "moi_label", label)
        object.__setattr__(self, "background_boxes", tuple(self.background_boxes))

    @property
    def label(self) -> DiagnosisLabel:
        return self.moi_label


@dataclass(frozen=True)
class WeakAnnotation:
    label: DiagnosisLabel

    def __post_init__(self):
        object.__setattr__(self, "label", DiagnosisLabel(self.label))


Annotation = StrongAnnotation | WeakAnnotation


@dataclass(frozen=True, eq=False)
class ImageRecord:
    """One grayscale image with exactly one annotation kind.

    ``group`` is the patient-group id used for split disjointness.
    ``truth`` optionally keeps the generator's full ground truth for weak
    records; it is never part of the annotation and is not serialized.
    """

    id: str
    pixels: np.ndarray
    annotation: Annotation
    split: str = "train"
    group: str = ""
    truth: StrongAnnotation | None = field(default=None, repr=False)

    def __post_init__(self):
        if not isinstance(self.annotation, (StrongAnnotation, WeakAnnotation)):
            raise TypeError(f"record {self.id}: unknown annotation {type(self.annotation)!r}")
        if self.split not in ("train", "test"):
            raise ValueError(f"record {self.id}: split must be 'train' or 'test'")
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise ValueError(f"record {self.id}: pixels must be a 2-D grid")
        if isinstance(self.annotation, StrongAnnotation):
            h, w = px.shape
            ann = self.annotation
            if not ann.moi_box.within(w, h):
                raise ValueError(f"record {self.id}: MoI box outside the image")
            if any(not b.within(w, h) for b in ann.background_boxes):
                raise ValueError(f"record {self.id}: background box outside the image")

    @property
    def is_strong(self) -> bool:
        return isinstance(self.annotation, StrongAnnotation)

    @property
    def label(self) -> DiagnosisLabel:
        return self.annotation.label

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    def replace(self, **changes) -> "ImageRecord":
        kw = dict(id=self.id, pixels=self.pixels, annotation=self.annotation,
                  split=self.split, group=self.group, truth=self.truth)
        kw.update(changes)
        return ImageRecord(**kw)

    def __eq__(self, other):
        if not isinstance(other, ImageRecord):
            return NotImplemented
        return (self.id == other.id and self.annotation == other.annotation
                and self.split == other.split and self.group == other.group
                and self.pixels.shape == other.pixels.shape
                and np.array_equal(self.pixels, other.pixels))

    __hash__ = None


def nms(regions: Sequence[RegionPrediction], iou_threshold: float,
        score: Sequence[float] | Callable[[RegionPrediction], float] | None = None,
        ) -> list[RegionPrediction]:
    """Greedy non-maximum suppression.

    ``score`` is either one value per region or a callable; by default the
    region's largest mass probability. Ties keep input order. A region is
    suppressed when its IoU with an already kept region exceeds the threshold.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou_threshold must lie in (0, 1]")
    regions = list(regions)
    if not regions:
        return []
    if score is None:
        scores = np.array([r.mass_score for r in regions])
    elif callable(score):
        scores = np.array([score(r) for r in regions], dtype=np.float64)
    else:
        scores = np.asarray(score, dtype=np.float64)
        if scores.shape != (len(regions),):
            raise ValueError("need exactly one score per region")
    keep = nms_indices(np.array([r.box.as_tuple() for r in regions]), scores, iou_threshold)
    return [regions[i] for i in keep]


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Index form of :func:`nms` over ``(N, 4)`` arrays."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    overlaps = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= overlaps[i] > iou_threshold
    return keep
