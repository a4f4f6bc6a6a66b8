"""Self-training: promote confidently consistent weak images to the strong set."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core_types import (BBox, DiagnosisLabel, ImageRecord, RegionPrediction, StrongAnnotation,
                         iou_matrix)
from .data.manifest import DatasetManifest
from .detector import DetectorConfig, TwoStageDetector
from .evaluation import EvalReport, compare, evaluate_raw, postprocess, raw_results
from .losses import MoICriterion, select_moi
from .training import TrainConfig, TrainResult, train


@dataclass(frozen=True)
class PromotionConfig:
    fraction: float = 0.5
    n_background_boxes: int = 2
    background_size: tuple[float, float] = (10.0, 28.0)
    prob_threshold: float = 0.5
    nms_iou: float = 0.3
    rounds: int = 1
    seed: int = 0
    warm_start: bool = False

    def __post_init__(self):
        if not 0.0 < self.fraction < 1.0:
            raise ValueError(f"promotion fraction must lie in (0, 1), got {self.fraction}")
        if self.n_background_boxes < 0:
            raise ValueError("n_background_boxes must be >= 0")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")


@dataclass
class Promotion:
    """Audit entry for one promoted image."""

    image_id: str
    label: str
    confidence: float
    pseudo_box: BBox
    background_boxes: tuple[BBox, ...]

    def as_dict(self) -> dict:
        return {"id": self.image_id, "label": self.label, "confidence": self.confidence,
                "pseudo_box": list(self.pseudo_box.as_tuple()),
                "background_boxes": [list(b.as_tuple()) for b in self.background_boxes]}


def pseudo_moi(regions: Sequence[RegionPrediction], label: DiagnosisLabel):
    """Most benign region of a B image, most malignant region of an M image."""
    if not regions:
        return None, -math.inf
    crit = MoICriterion.MOST_BENIGN if label is DiagnosisLabel.B else MoICriterion.MOST_MALIGNANT
    idx = select_moi([r.probs for r in regions], label, crit)
    return idx, regions[idx].probs[label.index]


def rank_for_promotion(confidences: Sequence[float]) -> list[int]:
    """Indices by descending confidence; ties keep input order."""
    c = np.asarray(confidences, dtype=np.float64)
    return [int(i) for i in np.argsort(-c, kind="stable")]


def sample_background_boxes(avoid: Sequence[BBox], width: int, height: int, n: int,
                            rng: np.random.Generator, size=(10.0, 28.0),
                            attempts: int = 100) -> tuple[BBox, ...]:
    """Rejection-sample up to ``n`` rectangles overlapping none of ``avoid``."""
    avoid_arr = np.array([b.as_tuple() for b in avoid]).reshape(-1, 4)
    out: list[BBox] = []
    for _ in range(attempts):
        if len(out) >= n:
            break
        bw, bh = rng.uniform(*size, size=2)
        if bw >= width or bh >= height:
            continue
        x0, y0 = rng.uniform(0, width - bw), rng.uniform(0, height - bh)
        cand = BBox(x0, y0, x0 + bw, y0 + bh)
        if len(avoid_arr) and iou_matrix([cand.as_tuple()], avoid_arr).max() > 0:
            continue
        out.append(cand)
    return tuple(out)


def promote(model: TwoStageDetector, weak_records: Sequence[ImageRecord],
            config: PromotionConfig = PromotionConfig(), raw=None):
    """Move the most confidently consistent weak images into the strong set.

    Returns ``(promoted strong records, remaining weak records, audit entries)``.
    ``raw`` may carry precomputed detections (one region list per record).
    """
    weak_records = list(weak_records)
    if not weak_records:
        raise ValueError("nothing to promote: the weak set is empty")
    if any(r.is_strong for r in weak_records):
        raise ValueError("promote expects weakly annotated records")
    if raw is None:
        raw = [r.regions for r in raw_results(model, weak_records)]
    picks, confidences = [], []
    for rec, regions in zip(weak_records, raw):
        if rec.label is DiagnosisLabel.N:
            picks.append(None)
            confidences.append(-math.inf)
            continue
        idx, conf = pseudo_moi(regions, rec.label)
        picks.append(idx)
        confidences.append(conf)
    order = rank_for_promotion(confidences)
    n_promote = int(len(weak_records) * config.fraction)
    chosen = [i for i in order[:n_promote] if picks[i] is not None]
    rng = np.random.default_rng(config.seed)
    promoted, audit = [], []
    for i in sorted(chosen):
        rec, regions = weak_records[i], raw[i]
        box = regions[picks[i]].box
        kept = postprocess(regions, config.prob_threshold, config.nms_iou).survivors
        bgs = sample_background_boxes([box, *(r.box for r in kept)], rec.width, rec.height,
                                      config.n_background_boxes, rng, config.background_size)
        ann = StrongAnnotation(box, rec.label, bgs)
        promoted.append(rec.replace(annotation=ann))
        audit.append(Promotion(rec.id, rec.label.value, float(confidences[i]), box, bgs))
    taken = set(chosen)
    remaining = [r for i, r in enumerate(weak_records) if i not in taken]
    return promoted, remaining, audit


@dataclass
class SelfTrainResult:
    initial: TrainResult
    retrained: TrainResult
    promotions: list[Promotion]
    initial_report: EvalReport | None = None
    retrained_report: EvalReport | None = None
    rounds: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        out = {"n_promoted": len(self.promotions), "rounds": self.rounds}
        if self.initial_report is not None:
            out["initial_corloc"] = self.initial_report.corloc.as_dict()
        if self.retrained_report is not None:
            out["retrained_corloc"] = self.retrained_report.corloc.as_dict()
            out["comparison"] = self.retrained_report.comparisons.get("initial")
        return out


def write_promotion_report(promotions: Sequence[Promotion], path):
    Path(path).write_text("\n".join(json.dumps(p.as_dict(), sort_keys=True)
                                    for p in promotions) + "\n")


def self_train(manifest: DatasetManifest, config: PromotionConfig = PromotionConfig(),
               train_config: TrainConfig | None = None,
               detector_config: DetectorConfig | None = None,
               initial: TrainResult | None = None, evaluate: bool = True,
               resamples: int = 2000) -> SelfTrainResult:
    """Train, promote a fraction of the weak pool, retrain from scratch.

    Held-out CorLoc of the initial and retrained models is reported when the
    manifest has a test split and ``evaluate`` is set.
    """
    train_config = train_config or TrainConfig()
    train_recs = manifest.select("train")
    strong = [r for r in train_recs if r.is_strong]
    weak = [r for r in train_recs if not r.is_strong]
    if initial is None:
        initial = train(strong + weak, config=train_config, detector_config=detector_config)
    current = initial
    all_promoted: list[Promotion] = []
    rounds = []
    for k in range(config.rounds):
        new_strong, weak, audit = promote(current.model, weak, config)
        strong = strong + new_strong
        all_promoted += audit
        # warm start continues from the previous model; otherwise a fresh init
        start = copy.deepcopy(current.model) if config.warm_start else None
        current = train(strong + weak, start, config=train_config,
                        detector_config=detector_config or current.model.config)
        rounds.append({"round": k + 1, "promoted": len(new_strong), "n_strong": len(strong),
                       "n_weak": len(weak)})
        if not weak:
            break
    result = SelfTrainResult(initial, current, all_promoted, rounds=rounds)
    test = manifest.test
    if evaluate and any(r.is_strong for r in test):
        result.initial_report = evaluate_raw(raw_results(initial.model, test),
                                             resamples=resamples, label="initial")
        result.retrained_report = evaluate_raw(raw_results(current.model, test),
                                               resamples=resamples, label="retrained")
        compare(result.retrained_report, result.initial_report, "initial", resamples)
    return result
