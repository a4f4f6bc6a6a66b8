"""Strongly supervised detection losses and the image-level MIL loss."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core_types import (DiagnosisLabel, RegionPrediction, StrongAnnotation, iou_matrix)
from .detector import ROI_BOX_WEIGHTS, RPN_BOX_WEIGHTS, ProposalSet, encode_boxes

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1
LOG_EPS = 1e-12


@dataclass(frozen=True)
class AssignmentRule:
    """Positive/negative labelling of anchors (RPN) and ROIs (ROI head).

    ``negative`` is ``"max_iou_below"`` (IoU under ``negative_iou`` with every
    mass box) or ``"background_box_overlap"`` (more than
    ``background_overlap`` of the proposal's area inside a background box).
    """

    positive_iou: float = 0.7
    negative: str = "max_iou_below"
    negative_iou: float = 0.3
    background_overlap: float = 0.7
    roi_positive_iou: float = 0.5
    roi_negative_iou: float = 0.5
    low_quality_matches: bool = False

    def __post_init__(self):
        if self.negative not in ("max_iou_below", "background_box_overlap"):
            raise ValueError(f"unknown negative rule {self.negative!r}")
        for name in ("positive_iou", "negative_iou", "background_overlap",
                     "roi_positive_iou", "roi_negative_iou"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")


@dataclass(frozen=True)
class ClassWeights:
    """Per-class loss weights for regions (bg, B, M) and images (N, B, M)."""

    region: tuple[float, float, float] = (1.0, 1.0, 1.0)
    image: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        for name in ("region", "image"):
            w = tuple(float(v) for v in getattr(self, name))
            if len(w) != 3 or any(v <= 0 for v in w):
                raise ValueError(f"{name} weights must be three positive numbers")
            object.__setattr__(self, name, w)


def inverse_frequency_weights(labels: Sequence[DiagnosisLabel]) -> tuple[float, float, float]:
    """Inverse label frequency, normalized to mean 1 over the labels present."""
    counts = np.zeros(3)
    for lab in labels:
        counts[DiagnosisLabel(lab).index] += 1
    present = counts > 0
    if not present.any():
        return (1.0, 1.0, 1.0)
    w = np.ones(3)
    w[present] = 1.0 / counts[present]
    w[present] /= w[present].mean()
    return tuple(float(v) for v in w)


class MoICriterion(str, enum.Enum):
    MOST_BENIGN = "most_benign"
    MOST_MALIGNANT = "most_malignant"
    MOST_DISCRIMINATIVE = "most_discriminative"
    MOST_ABNORMAL = "most_abnormal"

    @classmethod
    def parse(cls, value) -> "MoICriterion":
        if isinstance(value, cls):
            return value
        value = str(value)
        if not value.startswith("most_"):
            value = "most_" + value
        return cls(value)


def _boxes(x) -> np.ndarray:
    if isinstance(x, ProposalSet):
        x = x.boxes
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    if len(x) and not isinstance(x, np.ndarray) and hasattr(x[0], "as_tuple"):
        x = [b.as_tuple() for b in x]
    return np.asarray(x, dtype=np.float64).reshape(-1, 4)


def _overlap_fraction_matrix(props: np.ndarray, refs: np.ndarray) -> np.ndarray:
    lt = np.maximum(props[:, None, :2], refs[None, :, :2])
    rb = np.minimum(props[:, None, 2:], refs[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    area = (props[:, 2] - props[:, 0]) * (props[:, 3] - props[:, 1])
    return wh[..., 0] * wh[..., 1] / area[:, None]


def _negatives(props: np.ndarray, ious: np.ndarray, annotation: StrongAnnotation,
               rule: AssignmentRule, iou_below: float) -> np.ndarray:
    if rule.negative == "max_iou_below":
        return ious.max(axis=1) < iou_below
    bgs = _boxes(annotation.background_boxes)
    if len(bgs) == 0:
        return np.zeros(len(props), dtype=bool)
    return (_overlap_fraction_matrix(props, bgs) > rule.background_overlap).any(axis=1)


def assign_rpn_labels(proposals, annotation: StrongAnnotation,
                      rule: AssignmentRule = AssignmentRule()) -> np.ndarray:
    """Label each proposal (or anchor) 1 positive, 0 negative, -1 ignore."""
    props = _boxes(proposals)
    labels = np.full(len(props), IGNORE, dtype=np.int64)
    if len(props) == 0:
        return labels
    ious = iou_matrix(props, [annotation.moi_box.as_tuple()])
    labels[_negatives(props, ious, annotation, rule, rule.negative_iou)] = NEGATIVE
    best = ious.max(axis=1)
    pos = best > rule.positive_iou
    if rule.low_quality_matches:
        top = ious.max(axis=0)
        pos |= ((ious == top[None, :]) & (top[None, :] > 0)).any(axis=1)
    labels[pos] = POSITIVE
    return labels


def assign_roi_labels(rois, annotation: StrongAnnotation,
                      rule: AssignmentRule = AssignmentRule()) -> np.ndarray:
    """ROI-head targets: region class index, or -1 to ignore."""
    props = _boxes(rois)
    labels = np.full(len(props), IGNORE, dtype=np.int64)
    if len(props) == 0:
        return labels
    ious = iou_matrix(props, [annotation.moi_box.as_tuple()])
    labels[_negatives(props, ious, annotation, rule, rule.roi_negative_iou)] = 0
    labels[ious.max(axis=1) >= rule.roi_positive_iou] = annotation.moi_label.index
    return labels


def sample_labels(labels: np.ndarray, batch: int, positive_fraction: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Indices of a class-balanced subsample of the labelled entries."""
    pos = np.flatnonzero(labels > 0)
    neg = np.flatnonzero(labels == 0)
    n_pos = min(len(pos), int(batch * positive_fraction))
    n_neg = min(len(neg), batch - n_pos)
    pos = rng.choice(pos, n_pos, replace=False) if n_pos < len(pos) else pos
    neg = rng.choice(neg, n_neg, replace=False) if n_neg < len(neg) else neg
    return np.sort(np.concatenate([pos, neg]))


@dataclass
class StrongOutputs:
    """Network outputs for one strongly annotated image.

    ``anchor_index``/``roi_index`` optionally restrict the losses to a sampled
    subset of anchors/ROIs; ``None`` means every labelled entry.
    """

    anchors: torch.Tensor
    rpn_logits: torch.Tensor
    rpn_deltas: torch.Tensor
    rois: torch.Tensor
    cls_logits: torch.Tensor
    box_deltas: torch.Tensor
    anchor_index: np.ndarray | None = None
    roi_index: np.ndarray | None = None


class StrongLoss(NamedTuple):
    rpn_cls: torch.Tensor
    rpn_reg: torch.Tensor
    frc_cls: torch.Tensor
    frc_reg: torch.Tensor
    total: torch.Tensor


def smooth_l1(x: torch.Tensor, beta: float) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < beta, 0.5 * ax * ax / beta, ax - 0.5 * beta)


def strong_loss(outputs: StrongOutputs, annotation: StrongAnnotation,
                rule: AssignmentRule = AssignmentRule(),
                weights: ClassWeights | None = None) -> StrongLoss:
    """The four region-level loss terms and their unweighted sum.

    RPN: binary cross-entropy over labelled anchors and smooth-L1 (beta 1/9)
    over positives, both normalized by the number of labelled anchors used.
    ROI head: class-weighted cross-entropy and class-specific smooth-L1
    (beta 1) on mass ROIs, normalized by the number of labelled ROIs used.
    Regression targets are the mass box with the highest IoU.
    """
    weights = weights or ClassWeights()
    gt = [annotation.moi_box.as_tuple()]
    gt_t = torch.tensor(gt, dtype=outputs.rpn_deltas.dtype)

    # region proposal network
    a_labels = assign_rpn_labels(outputs.anchors, annotation, rule)
    a_idx = outputs.anchor_index
    if a_idx is None:
        a_idx = np.flatnonzero(a_labels >= 0)
    a_idx = np.asarray(a_idx, dtype=np.int64)
    n_a = max(len(a_idx), 1)
    a_t = torch.from_numpy(a_idx)
    target = torch.from_numpy((a_labels[a_idx] == POSITIVE).astype(np.float64)).to(outputs.rpn_logits.dtype)
    rpn_cls = F.binary_cross_entropy_with_logits(outputs.rpn_logits[a_t], target,
                                                 reduction="sum") / n_a
    pos = a_idx[a_labels[a_idx] == POSITIVE]
    if len(pos):
        anchors = outputs.anchors[torch.from_numpy(pos)].to(gt_t.dtype)
        match = iou_matrix(anchors.numpy(), gt).argmax(axis=1)
        tgt = encode_boxes(anchors, gt_t[torch.from_numpy(match)], RPN_BOX_WEIGHTS)
        rpn_reg = smooth_l1(outputs.rpn_deltas[torch.from_numpy(pos)] - tgt, 1.0 / 9).sum() / n_a
    else:
        rpn_reg = outputs.rpn_deltas.sum() * 0.0

    # ROI head
    r_labels = assign_roi_labels(outputs.rois, annotation, rule)
    r_idx = outputs.roi_index
    if r_idx is None:
        r_idx = np.flatnonzero(r_labels >= 0)
    r_idx = np.asarray(r_idx, dtype=np.int64)
    n_r = max(len(r_idx), 1)
    y = torch.from_numpy(r_labels[r_idx])
    ce = F.cross_entropy(outputs.cls_logits[torch.from_numpy(r_idx)], y, reduction="none")
    w = torch.tensor(weights.region, dtype=ce.dtype)[y]
    frc_cls = (w * ce).sum() / n_r
    fg = r_idx[r_labels[r_idx] > 0]
    if len(fg):
        rois = outputs.rois[torch.from_numpy(fg)].to(gt_t.dtype)
        match = iou_matrix(rois.numpy(), gt).argmax(axis=1)
        tgt = encode_boxes(rois, gt_t[torch.from_numpy(match)], ROI_BOX_WEIGHTS)
        cls = torch.from_numpy(r_labels[fg])
        pred = outputs.box_deltas[torch.from_numpy(fg), cls]
        frc_reg = smooth_l1(pred - tgt, 1.0).sum() / n_r
    else:
        frc_reg = outputs.box_deltas.sum() * 0.0

    total = rpn_cls + rpn_reg + frc_cls + frc_reg
    return StrongLoss(rpn_cls, rpn_reg, frc_cls, frc_reg, total)


def _criterion_for(label: DiagnosisLabel, criterion: MoICriterion) -> MoICriterion:
    if label is DiagnosisLabel.M:
        return MoICriterion.MOST_MALIGNANT
    if label is DiagnosisLabel.N:
        # a normal bag is judged by its least normal-looking instance
        return MoICriterion.MOST_ABNORMAL
    return criterion


def select_moi(probs, image_label, criterion) -> int:
    """Index of the mass of interest in an ``(R, 3)`` probability array.

    Ties resolve to the lowest index.
    """
    p = probs.detach().cpu().numpy() if isinstance(probs, torch.Tensor) else np.asarray(probs)
    p = p.reshape(-1, 3)
    crit = _criterion_for(DiagnosisLabel(image_label), MoICriterion.parse(criterion))
    if crit is MoICriterion.MOST_BENIGN:
        return int(np.argmax(p[:, 1]))
    if crit is MoICriterion.MOST_MALIGNANT:
        return int(np.argmax(p[:, 2]))
    if crit is MoICriterion.MOST_DISCRIMINATIVE:
        return int(np.argmax(np.maximum(p[:, 1], p[:, 2])))
    return int(np.argmin(p[:, 0]))


UNIFORM = (1 / 3, 1 / 3, 1 / 3)


def image_level_prediction(regions: Sequence[RegionPrediction], image_label,
                           criterion=MoICriterion.MOST_MALIGNANT):
    """Image-level distribution inherited from the selected MoI.

    Returns ``(P, index)``; an empty region set yields the uniform
    distribution and index ``None``.
    """
    regions = list(regions)
    if not regions:
        return UNIFORM, None
    idx = select_moi([r.probs for r in regions], image_label, criterion)
    return tuple(regions[idx].probs), idx


def mil_loss(regions, image_label, criterion=MoICriterion.MOST_MALIGNANT,
             weights: ClassWeights | None = None, eps: float = LOG_EPS):
    """Weighted cross-entropy between the image label and the MoI's triple.

    ``regions`` is either a list of :class:`RegionPrediction` (returns a float)
    or an ``(R, 3)`` probability tensor (returns a differentiable scalar; the
    MoI index itself is not differentiated).
    """
    label = DiagnosisLabel(image_label)
    w = (weights or ClassWeights()).image[label.index]
    if isinstance(regions, torch.Tensor):
        if regions.shape[0] == 0:
            return regions.sum() * 0.0 - w * float(np.log(1 / 3))
        idx = select_moi(regions, label, criterion)
        return -w * torch.log(regions[idx, label.index].clamp_min(eps))
    P, _ = image_level_prediction(regions, label, criterion)
    return float(-w * np.log(max(P[label.index], eps)))
