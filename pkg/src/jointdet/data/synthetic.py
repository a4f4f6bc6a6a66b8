"""Parametric generator of ultrasound-like images with elliptical masses.

Benign masses are smooth ellipses lying parallel to the skin with sharp
margins; malignant masses have lobulated/spiculated outlines, a tilted
(non-parallel) orientation and blurred margins. Each mass draws a latent
"malignancy look" from a class-dependent Beta distribution so the two
classes overlap and the cue is learnable but imperfect.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from ..core_types import (BBox, DiagnosisLabel, ImageRecord, StrongAnnotation,
                          WeakAnnotation, iou_matrix)
from .manifest import DatasetManifest


class ConfigError(ValueError):
    """Invalid or degenerate generator configuration."""


@dataclass
class SyntheticConfig:
    image_size: tuple[int, int] = (128, 128)
    # probability of 1, 2, ... masses per abnormal image
    mass_count_probs: tuple[float, ...] = (1.0,)
    # mass bounding-box area over image area
    size_ratio: tuple[float, float] = (0.03, 0.15)
    class_mix: dict = field(default_factory=lambda: {"B": 0.5, "M": 0.5})
    weak_class_mix: dict | None = None
    # Beta(a, b) parameters of the malignancy look per class
    benign_look: tuple[float, float] = (2.0, 5.0)
    malignant_look: tuple[float, float] = (5.0, 2.0)
    speckle: float = 0.35
    # scales how strongly the malignancy look shows in shape and margin
    cue_strength: float = 2.0
    n_strong: int = 10
    n_weak: int = 0
    n_test: int = 0
    n_test_normal: int = 0
    n_background_boxes: int = 2
    images_per_group: int = 2
    seed: int = 0

    def validate(self):
        h, w = self.image_size
        if h < 16 or w < 16:
            raise ConfigError(f"image_size too small: {self.image_size}")
        probs = np.asarray(self.mass_count_probs, dtype=float)
        if probs.size == 0 or np.any(probs < 0) or not np.isclose(probs.sum(), 1.0):
            raise ConfigError("mass_count_probs must be non-negative and sum to 1")
        lo, hi = self.size_ratio
        if not 0 < lo < hi:
            raise ConfigError(f"size_ratio must satisfy 0 < lo < hi, got {self.size_ratio}")
        if hi >= 0.5:
            raise ConfigError(f"mass larger than the image allows: size_ratio upper bound {hi}")
        for mix in (self.class_mix, self.weak_class_mix):
            if mix is None:
                continue
            if set(mix) - {"B", "M"}:
                raise ConfigError(f"class mix may only name B and M: {mix}")
            if any(v < 0 for v in mix.values()) or not np.isclose(sum(mix.values()), 1.0):
                raise ConfigError(f"class mix must sum to 1: {mix}")
        for name in ("benign_look", "malignant_look"):
            a, b = getattr(self, name)
            if a <= 0 or b <= 0:
                raise ConfigError(f"{name} Beta parameters must be positive")
        if self.speckle < 0:
            raise ConfigError("speckle must be non-negative")
        if not 0 <= self.cue_strength <= 2:
            raise ConfigError("cue_strength must lie in [0, 2]")
        counts = (self.n_strong, self.n_weak, self.n_test, self.n_test_normal)
        if any(c < 0 for c in counts) or sum(counts) == 0:
            raise ConfigError("record counts must be non-negative and not all zero")
        if self.images_per_group < 1:
            raise ConfigError("images_per_group must be >= 1")
        if self.n_background_boxes < 0:
            raise ConfigError("n_background_boxes must be >= 0")
        # the largest mass must fit with a margin
        side = np.sqrt(hi * h * w)
        if side * 1.6 > min(h, w) - 4:
            raise ConfigError(f"mass larger than image: side ~{side:.0f}px in {self.image_size}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["mass_count_probs"] = list(self.mass_count_probs)
        d["size_ratio"] = list(self.size_ratio)
        d["benign_look"] = list(self.benign_look)
        d["malignant_look"] = list(self.malignant_look)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        for k in ("image_size", "mass_count_probs", "size_ratio", "benign_look", "malignant_look"):
            if k in d:
                d[k] = tuple(d[k])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class _Mass:
    label: DiagnosisLabel
    look: float
    mask: np.ndarray
    soft: np.ndarray
    box: BBox


def _labels(n: int, mix: dict, rng: np.random.Generator) -> list[DiagnosisLabel]:
    # exact stratified counts, shuffled
    n_b = int(round(n * mix.get("B", 0.0)))
    labels = [DiagnosisLabel.B] * n_b + [DiagnosisLabel.M] * (n - n_b)
    rng.shuffle(labels)
    return labels


def _background(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    tissue = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=6.0)
    tissue /= tissue.std() + 1e-9
    yy = np.arange(h)[:, None]
    layers = np.sin(2 * np.pi * yy / rng.uniform(14, 30) + rng.uniform(0, 2 * np.pi))
    img = 110.0 + 18.0 * tissue + 8.0 * layers
    skin = max(3, h // 20)
    img[:skin] += 50.0
    # gentle depth attenuation
    img *= np.linspace(1.05, 0.85, h)[:, None]
    return img


def _mass_shape(h: int, w: int, look: float, cue: float, area_ratio: float,
                rng: np.random.Generator, cx: float, cy: float):
    """Boolean mask and soft (blurred) mask of one mass.

    Every class cue is driven by ``look`` (scaled by ``cue``), never by the
    label itself.
    """
    area = area_ratio * h * w
    q = cue * (look - 0.5)
    aspect = max(rng.uniform(1.1, 1.7) - 0.8 * q, 0.8)
    # bbox of an axis-aligned ellipse is 4ab; aim for the requested bbox area
    b = np.sqrt(area / (4.0 * aspect))
    a = aspect * b
    # orientation: parallel to the skin for low look, tilted for high look
    tilt = np.deg2rad(max(q, 0.0) * 2 * rng.uniform(45, 90) * rng.choice([-1, 1])
                      + rng.normal(0, 10))
    n_harm = rng.integers(2, 5)
    lobes = [(k, rng.normal(0, 0.05 + 0.12 * max(0.5 + q, 0.0)), rng.uniform(0, 2 * np.pi))
             for k in rng.integers(2, 7, size=n_harm)]
    n_spikes = int(rng.integers(7, 15))
    spike_amp = 0.4 * max(q + 0.15, 0.0)
    spike_phase = rng.uniform(0, 2 * np.pi)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx + 0.5 - cx, yy + 0.5 - cy
    c, s = np.cos(tilt), np.sin(tilt)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    theta = np.arctan2(v, u)
    r = np.hypot(u, v)
    radius = a * b / np.sqrt((b * np.cos(theta)) ** 2 + (a * np.sin(theta)) ** 2)
    mod = np.ones_like(theta)
    for k, amp, ph in lobes:
        mod += amp * np.cos(k * theta + ph)
    mod += spike_amp * np.maximum(np.cos(n_spikes * theta + spike_phase), 0.0) ** 6
    radius = radius * np.clip(mod, 0.5, 1.8)
    mask = r <= radius
    blur = max(1.2 + 1.6 * q + rng.normal(0, 0.3), 0.4)
    soft = ndimage.gaussian_filter(mask.astype(np.float64), sigma=blur)
    return mask, soft


def _place_masses(h, w, labels, cfg: SyntheticConfig, rng) -> list[_Mass]:
    masses: list[_Mass] = []
    for label in labels:
        beta = cfg.benign_look if label is DiagnosisLabel.B else cfg.malignant_look
        look = float(rng.beta(*beta))
        for _ in range(100):
            ratio = rng.uniform(*cfg.size_ratio)
            side = np.sqrt(ratio * h * w)
            margin = 0.8 * side + 2
            cx = rng.uniform(margin, w - margin)
            cy = rng.uniform(max(margin, h * 0.12 + side / 2), h - margin)
            mask, soft = _mass_shape(h, w, look, cfg.cue_strength, ratio, rng, cx, cy)
            ys, xs = np.nonzero(mask)
            if ys.size < 9:
                continue
            box = BBox(xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)
            if not box.within(w, h) or box.x_min == 0 or box.y_min == 0 \
                    or box.x_max == w or box.y_max == h:
                continue
            if masses and iou_matrix([box.as_tuple()], [m.box.as_tuple() for m in masses]).max() > 0:
                continue
            masses.append(_Mass(label, look, mask, soft, box))
            break
    return masses


def _render(h, w, masses: list[_Mass], cfg: SyntheticConfig, rng) -> np.ndarray:
    img = _background(h, w, rng)
    for m in masses:
        q = cfg.cue_strength * (m.look - 0.5)
        inner = rng.uniform(0.3, 0.6) + 0.1 * max(0.5 + q, 0.0) * ndimage.gaussian_filter(
            rng.standard_normal((h, w)), 2.0)
        img = img * (1 - m.soft) + img * inner * m.soft
        # posterior shadowing (suspicious) or enhancement (cyst-like) below the mass
        col = m.soft.max(axis=0)
        below = np.zeros((h, w))
        bottom = int(m.box.y_max)
        below[bottom:] = col[None, :] * np.linspace(1, 0, h - bottom)[:, None]
        img *= 1 - 0.4 * q * ndimage.gaussian_filter(below, 2.0)
    if cfg.speckle > 0:
        k = 1.0 / cfg.speckle ** 2
        speckle = rng.gamma(k, 1.0 / k, size=(h, w))
        speckle = ndimage.gaussian_filter(speckle, 0.7)
        speckle /= speckle.mean()
        img = img * speckle
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def _background_boxes(h, w, avoid: list[BBox], n: int, rng) -> tuple[BBox, ...]:
    boxes: list[BBox] = []
    avoid_arr = [b.as_tuple() for b in avoid]
    for _ in range(100):
        if len(boxes) >= n:
            break
        bw, bh = rng.uniform(10, 28, size=2)
        x0, y0 = rng.uniform(0, w - bw), rng.uniform(0, h - bh)
        cand = BBox(x0, y0, x0 + bw, y0 + bh)
        if avoid_arr and iou_matrix([cand.as_tuple()], avoid_arr).max() > 0:
            continue
        boxes.append(cand)
    return tuple(boxes)


def render_image(label: DiagnosisLabel, cfg: SyntheticConfig, rng: np.random.Generator):
    """Render one image; returns ``(pixels, masses)`` with the MoI first."""
    h, w = cfg.image_size
    masses: list[_Mass] = []
    if label is not DiagnosisLabel.N:
        n = int(rng.choice(len(cfg.mass_count_probs), p=cfg.mass_count_probs)) + 1
        # secondary masses are benign; the MoI carries the image label
        masses = _place_masses(h, w, [label] + [DiagnosisLabel.B] * (n - 1), cfg, rng)
        if not masses:
            raise ConfigError("could not place a mass; size_ratio too large for image_size")
        if label is DiagnosisLabel.B:
            # for benign images the most suspicious-looking mass is the MoI
            masses.sort(key=lambda m: -m.look)
    return _render(h, w, masses, cfg, rng), masses


def generate_synthetic(config: SyntheticConfig) -> DatasetManifest:
    """Generate a deterministic synthetic dataset described by ``config``."""
    config.validate()
    root = np.random.SeedSequence(config.seed)
    label_rng = np.random.default_rng(root.spawn(1)[0])
    weak_mix = config.weak_class_mix or config.class_mix

    plan: list[tuple[str, str, DiagnosisLabel]] = []
    plan += [("train", "strong", lab) for lab in _labels(config.n_strong, config.class_mix, label_rng)]
    plan += [("train", "weak", lab) for lab in _labels(config.n_weak, weak_mix, label_rng)]
    plan += [("test", "strong", lab) for lab in _labels(config.n_test, config.class_mix, label_rng)]
    plan += [("test", "normal", DiagnosisLabel.N)] * config.n_test_normal

    streams = root.spawn(len(plan))
    records = []
    counters: dict[tuple[str, str], int] = {}
    for (split, kind, label), ss in zip(plan, streams):
        rng = np.random.default_rng(ss)
        pixels, masses = render_image(label, config, rng)
        i = counters.get((split, kind), 0)
        counters[(split, kind)] = i + 1
        truth = None
        if masses:
            truth = StrongAnnotation(
                masses[0].box, label,
                _background_boxes(*config.image_size, [m.box for m in masses],
                                  config.n_background_boxes, rng))
        if kind == "strong":
            annotation = truth
        else:
            annotation = WeakAnnotation(label)
        group = f"{split}-{kind}-g{i // config.images_per_group:05d}"
        records.append(ImageRecord(id=f"{split}-{kind}-{i:05d}", pixels=pixels,
                                   annotation=annotation, split=split, group=group,
                                   truth=truth))
    return DatasetManifest(records=records, source="synthetic")
