"""Line-delimited JSON manifest: a header line, then one record per line.

Record schema::

    {"id": str, "image": relative PNG path, "split": "train"|"test",
     "group": str, "supervision": "strong"|"weak", "label": "N"|"B"|"M",
     "moi_box": [x0, y0, x1, y1],           # strong only
     "background_boxes": [[x0, y0, x1, y1]]}  # strong only

Weak records must not carry boxes; strong records must mark a B or M mass.
"""

from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..core_types import BBox, DiagnosisLabel, ImageRecord, StrongAnnotation, WeakAnnotation

FORMAT = "jointdet-manifest"
VERSION = 1
_RECORD_KEYS = {"id", "image", "split", "group", "supervision", "label",
                "moi_box", "background_boxes"}


class ManifestError(ValueError):
    """Schema violation while reading or writing a manifest."""


@dataclass
class DatasetManifest:
    records: list[ImageRecord] = field(default_factory=list)
    source: str = "synthetic"

    def __post_init__(self):
        if self.source not in ("synthetic", "external"):
            raise ManifestError(f"unknown source tag {self.source!r}")
        ids = [r.id for r in self.records]
        if len(ids) != len(set(ids)):
            dup = [k for k, v in Counter(ids).items() if v > 1]
            raise ManifestError(f"duplicate record ids: {dup[:5]}")
        train_groups = {r.group for r in self.records if r.split == "train"}
        test_groups = {r.group for r in self.records if r.split == "test"}
        shared = train_groups & test_groups
        if shared:
            raise ManifestError(f"patient groups appear in both splits: {sorted(shared)[:5]}")

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return self.source == other.source and self.records == other.records

    def counts(self) -> dict[tuple[str, str, str], int]:
        """Record counts keyed by ``(split, supervision, label)``."""
        return dict(Counter((r.split, "strong" if r.is_strong else "weak", r.label.value)
                            for r in self.records))

    def select(self, split: str | None = None, strong: bool | None = None) -> list[ImageRecord]:
        out = self.records
        if split is not None:
            out = [r for r in out if r.split == split]
        if strong is not None:
            out = [r for r in out if r.is_strong == strong]
        return list(out)

    @property
    def strong_train(self) -> list[ImageRecord]:
        return self.select("train", True)

    @property
    def weak_train(self) -> list[ImageRecord]:
        return self.select("train", False)

    @property
    def test(self) -> list[ImageRecord]:
        return self.select("test")


def _box_list(b: BBox) -> list[float]:
    return [float(v) for v in b.as_tuple()]


def record_to_dict(record: ImageRecord, image_path: str) -> dict:
    d = {"id": record.id, "image": image_path, "split": record.split, "group": record.group,
         "supervision": "strong" if record.is_strong else "weak",
         "label": record.label.value}
    if record.is_strong:
        d["moi_box"] = _box_list(record.annotation.moi_box)
        d["background_boxes"] = [_box_list(b) for b in record.annotation.background_boxes]
    return d


def _parse_box(value, where: str) -> BBox:
    if not isinstance(value, list) or len(value) != 4:
        raise ManifestError(f"{where}: box must be a list of four numbers")
    try:
        return BBox(*value)
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"{where}: {exc}") from None


def record_from_dict(d: dict, pixels: np.ndarray) -> ImageRecord:
    rid = d.get("id", "<missing id>")
    where = f"record {rid!r}"
    unknown = set(d) - _RECORD_KEYS
    if unknown:
        raise ManifestError(f"{where}: unknown keys {sorted(unknown)}")
    for key in ("id", "image", "split", "supervision", "label"):
        if key not in d:
            raise ManifestError(f"{where}: missing {key!r}")
    try:
        label = DiagnosisLabel(d["label"])
    except ValueError:
        raise ManifestError(f"{where}: unknown label {d['label']!r}") from None
    kind = d["supervision"]
    if kind == "weak":
        if "moi_box" in d or "background_boxes" in d:
            raise ManifestError(f"{where}: weak record must not carry bounding boxes")
        annotation = WeakAnnotation(label)
    elif kind == "strong":
        if label is DiagnosisLabel.N:
            raise ManifestError(f"{where}: strong record cannot have label N")
        if "moi_box" not in d:
            raise ManifestError(f"{where}: strong record needs a moi_box")
        moi = _parse_box(d["moi_box"], where)
        bgs = tuple(_parse_box(b, where) for b in d.get("background_boxes", []))
        annotation = StrongAnnotation(moi, label, bgs)
    else:
        raise ManifestError(f"{where}: supervision must be 'strong' or 'weak', got {kind!r}")
    try:
        return ImageRecord(id=d["id"], pixels=pixels, annotation=annotation,
                           split=d["split"], group=d.get("group", ""))
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"{where}: {exc}") from None


def save_manifest(manifest: DatasetManifest, path, image_dir: str = "images") -> Path:
    """Write ``manifest`` as JSON lines plus one PNG per record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    (path.parent / image_dir).mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"format": FORMAT, "version": VERSION, "source": manifest.source},
                        sort_keys=True)]
    for rec in manifest.records:
        rel = f"{image_dir}/{rec.id}.png"
        Image.fromarray(np.asarray(rec.pixels, dtype=np.uint8), mode="L").save(path.parent / rel)
        lines.append(json.dumps(record_to_dict(rec, rel), sort_keys=True))
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)
    return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: bad header line: {exc}") from None
    if header.get("format") != FORMAT:
        raise ManifestError(f"{path}: not a {FORMAT} file")
    if header.get("version") != VERSION:
        raise ManifestError(f"{path}: unsupported version {header.get('version')}")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
        img_path = path.parent / d.get("image", "")
        if not img_path.is_file():
            raise ManifestError(f"record {d.get('id')!r}: missing image {img_path}")
        with Image.open(img_path) as im:
            pixels = np.asarray(im.convert("L"), dtype=np.uint8)
        records.append(record_from_dict(d, pixels))
    return DatasetManifest(records=records, source=header.get("source", "external"))
