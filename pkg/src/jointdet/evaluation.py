"""Post-processing, CorLoc, FROC, false positives on normal images and bootstrap statistics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .core_types import (Annotation, BBox, DiagnosisLabel, RegionPrediction, StrongAnnotation,
                         WeakAnnotation, iou, nms)

CORLOC_IOU = 0.5
CORLOC_PROB = 0.5
DEFAULT_RESAMPLES = 2000
FROC_GRID = np.linspace(0.0, 1.0, 101)


@dataclass
class DetectionResult:
    image_id: str
    survivors: list[RegionPrediction]
    gt: Annotation | None = None


@dataclass
class RawResult:
    """Every region scored for one image, before thresholding and NMS."""

    image_id: str
    regions: list[RegionPrediction]
    gt: Annotation | None = None


@dataclass(frozen=True)
class FrocPoint:
    threshold: float
    fp_per_image: float
    sensitivity: float


@dataclass
class BootstrapReport:
    estimate: float
    low: float
    high: float
    resamples: int
    level: float = 0.95
    p_value: float | None = None

    def as_dict(self) -> dict:
        return {"estimate": self.estimate, "ci": [self.low, self.high], "level": self.level,
                "resamples": self.resamples, "p_value": self.p_value}


def postprocess(regions: Sequence[RegionPrediction], prob_threshold: float = 0.5,
                nms_iou: float = 0.3, image_id: str = "", gt: Annotation | None = None,
                strict: bool = False) -> DetectionResult:
    """Drop regions whose best mass probability is below the threshold, then NMS.

    With ``strict`` a region must exceed the threshold rather than reach it.
    """
    if not 0.0 <= prob_threshold <= 1.0:
        raise ValueError("prob_threshold must lie in [0, 1]")
    if strict:
        kept = [r for r in regions if r.mass_score > prob_threshold]
    else:
        kept = [r for r in regions if r.mass_score >= prob_threshold]
    return DetectionResult(image_id, nms(kept, nms_iou), gt)


def _strong_gt(result) -> StrongAnnotation:
    if not isinstance(result.gt, StrongAnnotation):
        raise ValueError(f"image {result.image_id!r}: CorLoc needs a strong (boxed) annotation")
    return result.gt


def is_correct(result: DetectionResult) -> bool:
    """PASCAL-style correct localization of the annotated mass."""
    gt = _strong_gt(result)
    k = gt.moi_label.index
    return any(r.probs[k] > CORLOC_PROB and iou(r.box, gt.moi_box) > CORLOC_IOU
               for r in result.survivors)


def corloc_indicators(results: Iterable[DetectionResult]) -> np.ndarray:
    return np.array([1 if is_correct(r) else 0 for r in results], dtype=np.int64)


def corloc(results: Iterable[DetectionResult]) -> float:
    ind = corloc_indicators(results)
    if ind.size == 0:
        raise ValueError("CorLoc of an empty result set is undefined")
    return float(ind.mean())


def _lesions(gt) -> list[tuple[BBox, int]]:
    if isinstance(gt, StrongAnnotation):
        return [(gt.moi_box, gt.moi_label.index)]
    if isinstance(gt, WeakAnnotation) and gt.label is DiagnosisLabel.N:
        return []
    raise ValueError("FROC needs boxed lesions or normal images")


def match_survivors(survivors: Sequence[RegionPrediction], gt):
    """Greedy one-to-one matching; returns ``(lesions detected, false positives)``.

    A survivor can claim a lesion when it overlaps it with IoU > 0.5 and its
    more likely mass class is the lesion's class. Above a 0.5 operating point
    this is the CorLoc rule; below it, whether a survivor is a hit no longer
    depends on the threshold, so both FROC coordinates stay monotone.
    """
    used = set()
    tp = 0
    for box, k in _lesions(gt):
        other = 3 - k
        cands = [(s.probs[k], -i, i) for i, s in enumerate(survivors)
                 if i not in used and s.probs[k] >= s.probs[other]
                 and iou(s.box, box) > CORLOC_IOU]
        if cands:
            used.add(max(cands)[2])
            tp += 1
    return tp, len(survivors) - len(used)


def froc(raw: Sequence[RawResult], thresholds: Sequence[float] = FROC_GRID,
         nms_iou: float = 0.3) -> list[FrocPoint]:
    """Sensitivity and mean false positives per image across operating points."""
    thresholds = list(thresholds)
    if not thresholds:
        raise ValueError("empty threshold grid")
    raw = list(raw)
    n_lesions = sum(len(_lesions(r.gt)) for r in raw)
    points = []
    for t in thresholds:
        tp = fp = 0
        for r in raw:
            res = postprocess(r.regions, t, nms_iou, r.image_id, r.gt, strict=True)
            d, f = match_survivors(res.survivors, r.gt)
            tp += d
            fp += f
        points.append(FrocPoint(float(t), fp / max(len(raw), 1),
                                tp / n_lesions if n_lesions else 0.0))
    return points


def fp_per_normal(results: Iterable[DetectionResult]) -> float:
    counts = []
    for r in results:
        if not (isinstance(r.gt, WeakAnnotation) and r.gt.label is DiagnosisLabel.N):
            raise ValueError(f"image {r.image_id!r} is not a normal image")
        counts.append(len(r.survivors))
    if not counts:
        raise ValueError("no normal images")
    return float(np.mean(counts))


def bootstrap_ci(indicators: Sequence[float], resamples: int = DEFAULT_RESAMPLES,
                 level: float = 0.95, seed: int = 0) -> BootstrapReport:
    """Percentile bootstrap interval of the mean, resampling images with replacement."""
    x = np.asarray(indicators, dtype=np.float64)
    if x.size == 0:
        raise ValueError("no indicators")
    if resamples < 100:
        raise ValueError("use at least 100 resamples")
    rng = np.random.default_rng(seed)
    means = x[rng.integers(0, x.size, size=(resamples, x.size))].mean(axis=1)
    tail = (1.0 - level) / 2 * 100
    low, high = np.percentile(means, [tail, 100 - tail])
    return BootstrapReport(float(x.mean()), float(low), float(high), resamples, level)


def paired_bootstrap(a: Sequence[float], b: Sequence[float], resamples: int = DEFAULT_RESAMPLES,
                     level: float = 0.95, seed: int = 0):
    """Bootstrap CorLoc pairs on shared resamples of the same images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired indicators must be equal-length vectors")
    if a.size == 0:
        raise ValueError("no indicators")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, a.size, size=(resamples, a.size))
    return a[idx].mean(axis=1), b[idx].mean(axis=1)


def paired_pvalue(a: Sequence[float], b: Sequence[float], resamples: int = DEFAULT_RESAMPLES,
                  seed: int = 0) -> float:
    """Paired t-test between bootstrap CorLoc replicates of two methods."""
    ra, rb = paired_bootstrap(a, b, resamples, seed=seed)
    d = ra - rb
    if np.all(d == 0):
        return 1.0
    return float(stats.ttest_rel(ra, rb).pvalue)


def difference_ci(a, b, resamples: int = DEFAULT_RESAMPLES, level: float = 0.95,
                  seed: int = 0) -> BootstrapReport:
    ra, rb = paired_bootstrap(a, b, resamples, level, seed)
    d = ra - rb
    tail = (1.0 - level) / 2 * 100
    low, high = np.percentile(d, [tail, 100 - tail])
    return BootstrapReport(float(np.mean(a) - np.mean(b)), float(low), float(high), resamples,
                           level, paired_pvalue(a, b, resamples, seed))


# interchange files

def region_to_dict(r: RegionPrediction) -> dict:
    return {"box": [round(v, 6) for v in r.box.as_tuple()],
            "probs": [round(v, 8) for v in r.probs], "objectness": round(r.objectness, 8)}


def region_from_dict(d: dict) -> RegionPrediction:
    probs = np.asarray(d["probs"], dtype=np.float64)
    return RegionPrediction(BBox(*d["box"]), tuple(probs / probs.sum()), d.get("objectness", 1.0))


def save_detections(raw: Sequence[RawResult], path):
    lines = [json.dumps({"id": r.image_id, "regions": [region_to_dict(x) for x in r.regions]},
                        sort_keys=True) for r in raw]
    Path(path).write_text("\n".join(lines) + "\n")


def load_detections(path) -> dict[str, list[RegionPrediction]]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            out[d["id"]] = [region_from_dict(x) for x in d["regions"]]
    return out


@dataclass
class EvalReport:
    """Per-image indicators plus the aggregate measures derived from them."""

    image_ids: list[str]
    indicators: np.ndarray
    corloc: BootstrapReport
    froc: list[FrocPoint] = field(default_factory=list)
    fp_per_normal: float | None = None
    comparisons: dict = field(default_factory=dict)
    label: str = ""

    def as_dict(self) -> dict:
        return {
            "label": self.label,
            "n_images": len(self.image_ids),
            "corloc": self.corloc.as_dict(),
            "fp_per_normal_image": self.fp_per_normal,
            "froc": [{"threshold": round(p.threshold, 6), "fp_per_image": p.fp_per_image,
                      "sensitivity": p.sensitivity} for p in self.froc],
            "per_image": {i: int(v) for i, v in zip(self.image_ids, self.indicators)},
            "comparisons": self.comparisons,
        }


def evaluate_raw(raw: Sequence[RawResult], prob_threshold: float = CORLOC_PROB,
                 nms_iou: float = 0.3, resamples: int = DEFAULT_RESAMPLES, seed: int = 0,
                 froc_grid: Sequence[float] = FROC_GRID, label: str = "") -> EvalReport:
    """CorLoc with bootstrap CI on boxed images, FROC, and FP rate on normal images."""
    boxed = [r for r in raw if isinstance(r.gt, StrongAnnotation)]
    normal = [r for r in raw if isinstance(r.gt, WeakAnnotation) and r.gt.label is DiagnosisLabel.N]
    if not boxed:
        raise ValueError("evaluation needs images with boxed ground truth")
    results = [postprocess(r.regions, prob_threshold, nms_iou, r.image_id, r.gt) for r in boxed]
    ind = corloc_indicators(results)
    report = EvalReport([r.image_id for r in boxed], ind,
                        bootstrap_ci(ind, resamples, seed=seed), label=label)
    report.froc = froc(boxed + normal, froc_grid, nms_iou)
    if normal:
        report.fp_per_normal = fp_per_normal(
            [postprocess(r.regions, prob_threshold, nms_iou, r.image_id, r.gt) for r in normal])
    return report


def compare(report: EvalReport, baseline: EvalReport, name: str = "baseline",
            resamples: int = DEFAULT_RESAMPLES, seed: int = 0) -> dict:
    """Attach a paired comparison against ``baseline`` evaluated on the same images."""
    if report.image_ids != baseline.image_ids:
        raise ValueError("reports cover different images")
    diff = difference_ci(report.indicators, baseline.indicators, resamples, seed=seed)
    out = {"difference": diff.estimate, "difference_ci": [diff.low, diff.high],
           "p_value": diff.p_value}
    report.comparisons[name] = out
    return out


def plot_froc(points: Sequence[FrocPoint], path, label: str = ""):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.plot([p.fp_per_image for p in points], [p.sensitivity for p in points],
            marker=".", label=label or None)
    ax.set_xlabel("mean false positives per image")
    ax.set_ylabel("sensitivity")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    if label:
        ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None} if str(path).endswith(".png") else None)
    plt.close(fig)


def raw_results(model, records, batch_size: int = 16) -> list[RawResult]:
    """Run ``model`` over ``records`` and keep every scored region."""
    records = list(records)
    out = []
    for i in range(0, len(records), batch_size):
        chunk = records[i:i + batch_size]
        for rec, det in zip(chunk, model.detect([r.pixels for r in chunk])):
            out.append(RawResult(rec.id, det.regions, rec.annotation))
    return out
