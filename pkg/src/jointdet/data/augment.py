"""Photometric and geometric augmentation for both training streams."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..core_types import BBox, ImageRecord, StrongAnnotation


@dataclass(frozen=True)
class AugmentationPolicy:
    """Augmentation ranges for one stream.

    The default strong-stream policy flips and jitters brightness/contrast;
    the weak-stream policy adds rotation and central cropping on top.
    """

    stream: str = "strong"
    hflip: float = 0.5
    brightness: float = 0.1
    contrast: tuple[float, float] = (0.9, 1.1)
    rotation: float = 0.0
    crop: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.stream not in ("strong", "weak"):
            raise ValueError(f"stream must be 'strong' or 'weak', got {self.stream!r}")
        if not 0.0 <= self.hflip <= 1.0:
            raise ValueError("hflip probability must lie in [0, 1]")
        if self.brightness < 0 or self.rotation < 0:
            raise ValueError("brightness and rotation ranges must be non-negative")
        lo, hi = self.contrast
        if not 0 < lo <= hi:
            raise ValueError(f"bad contrast range {self.contrast}")
        lo, hi = self.crop
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"bad crop range {self.crop}")

    @classmethod
    def for_stream(cls, stream: str) -> "AugmentationPolicy":
        if stream == "weak":
            return cls(stream="weak", rotation=10.0, crop=(0.8, 1.0))
        return cls(stream=stream)

    @classmethod
    def identity(cls, stream: str = "strong") -> "AugmentationPolicy":
        return cls(stream=stream, hflip=0.0, brightness=0.0, contrast=(1.0, 1.0))

    @property
    def is_identity(self) -> bool:
        return (self.hflip == 0 and self.brightness == 0 and self.contrast == (1.0, 1.0)
                and self.rotation == 0 and self.crop == (1.0, 1.0))


def flip_box(box: BBox, width: float) -> BBox:
    return BBox(width - box.x_max, box.y_min, width - box.x_min, box.y_max)


def _map_annotation(ann: StrongAnnotation, fn) -> StrongAnnotation | None:
    moi = fn(ann.moi_box)
    if moi is None:
        return None
    bgs = tuple(b for b in (fn(b) for b in ann.background_boxes) if b is not None)
    return StrongAnnotation(moi, ann.moi_label, bgs)


def _rotate(pixels: np.ndarray, angle_deg: float) -> np.ndarray:
    h, w = pixels.shape
    t = np.deg2rad(angle_deg)
    c, s = np.cos(t), np.sin(t)
    # output (y, x) samples input at R^-1 (p - centre) + centre
    inv = np.array([[c, -s], [s, c]])
    centre = np.array([h / 2 - 0.5, w / 2 - 0.5])
    offset = centre - inv @ centre
    out = ndimage.affine_transform(pixels.astype(np.float64), inv, offset=offset,
                                   order=1, mode="reflect")
    return out


def _rotate_box(box: BBox, angle_deg: float, width: int, height: int) -> BBox | None:
    t = np.deg2rad(angle_deg)
    c, s = np.cos(t), np.sin(t)
    fwd = np.array([[c, s], [-s, c]])  # inverse of the sampling matrix
    centre = np.array([height / 2, width / 2])
    corners = np.array([[box.y_min, box.x_min], [box.y_min, box.x_max],
                        [box.y_max, box.x_min], [box.y_max, box.x_max]])
    moved = (corners - centre) @ fwd.T + centre
    ys, xs = moved[:, 0], moved[:, 1]
    try:
        rotated = BBox(xs.min(), ys.min(), xs.max(), ys.max())
    except ValueError:
        return None
    return rotated.clip(width, height)


def _crop(pixels: np.ndarray, frac: float):
    h, w = pixels.shape
    ch, cw = h * frac, w * frac
    y0, x0 = (h - ch) / 2, (w - cw) / 2
    # sample output pixel centres from the central window
    ys = y0 + (np.arange(h) + 0.5) * ch / h - 0.5
    xs = x0 + (np.arange(w) + 0.5) * cw / w - 0.5
    grid = np.meshgrid(ys, xs, indexing="ij")
    out = ndimage.map_coordinates(pixels.astype(np.float64), grid, order=1, mode="nearest")
    return out, (x0, y0, cw, ch)


def _crop_box(box: BBox, window, width: int, height: int) -> BBox | None:
    x0, y0, cw, ch = window
    sx, sy = width / cw, height / ch
    try:
        moved = BBox((box.x_min - x0) * sx, (box.y_min - y0) * sy,
                     (box.x_max - x0) * sx, (box.y_max - y0) * sy)
    except ValueError:
        return None
    return moved.clip(width, height)


def augment(record: ImageRecord, policy: AugmentationPolicy, rng: np.random.Generator,
            max_tries: int = 20) -> ImageRecord:
    """Return an augmented copy of ``record``; boxes follow the pixels.

    A geometric draw that would push the MoI entirely out of a strong record
    is redrawn.
    """
    stream = "strong" if record.is_strong else "weak"
    if policy.stream != stream:
        raise ValueError(f"record {record.id} is {stream}-annotated but the policy is for "
                         f"the {policy.stream} stream")
    if policy.is_identity:
        return record
    for _ in range(max_tries):
        out = _augment_once(record, policy, rng)
        if out is not None:
            return out
    # every draw lost the MoI; fall back to photometric changes only
    return _augment_once(record, AugmentationPolicy(
        stream=policy.stream, hflip=policy.hflip, brightness=policy.brightness,
        contrast=policy.contrast), rng)


def _augment_once(record: ImageRecord, policy: AugmentationPolicy, rng) -> ImageRecord | None:
    px = np.asarray(record.pixels, dtype=np.float64)
    h, w = px.shape
    ann = record.annotation
    strong = isinstance(ann, StrongAnnotation)

    if policy.hflip > 0 and rng.random() < policy.hflip:
        px = px[:, ::-1]
        if strong:
            ann = _map_annotation(ann, lambda b: flip_box(b, w))
    if policy.rotation > 0:
        angle = rng.uniform(-policy.rotation, policy.rotation)
        px = _rotate(px, angle)
        if strong:
            ann = _map_annotation(ann, lambda b: _rotate_box(b, angle, w, h))
            if ann is None:
                return None
    lo, hi = policy.crop
    if hi < 1.0 or lo < hi:
        frac = rng.uniform(lo, hi)
        if frac < 1.0:
            px, window = _crop(px, frac)
            if strong:
                ann = _map_annotation(ann, lambda b: _crop_box(b, window, w, h))
                if ann is None:
                    return None
    if policy.brightness > 0:
        px = px + rng.uniform(-policy.brightness, policy.brightness) * 255.0
    lo, hi = policy.contrast
    if lo != 1.0 or hi != 1.0:
        c = rng.uniform(lo, hi)
        mean = px.mean()
        px = (px - mean) * c + mean
    pixels = np.clip(np.round(px), 0, 255).astype(np.uint8)
    return record.replace(pixels=pixels, annotation=ann)
