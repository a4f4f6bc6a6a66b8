"""Random small instances shared by the unit tests and the acceptance run."""

import numpy as np
import torch

from jointdet.core_types import BBox, RegionPrediction, StrongAnnotation, WeakAnnotation
from jointdet.losses import AssignmentRule, StrongOutputs


def _rand_boxes(rng, n, lo=0.0, hi=60.0, min_size=4.0, max_size=30.0):
    xy = rng.uniform(lo, hi, (n, 2))
    wh = rng.uniform(min_size, max_size, (n, 2))
    return np.hstack([xy, xy + wh])


def strong_instance(rng, n_anchors=12, n_rois=8):
    """Random outputs, annotation and rule with positives, negatives and ignores."""
    gt = _rand_boxes(rng, 1, 10, 40, 10, 25)[0]
    # jitter copies of the GT so that some entries are positive
    near = gt + rng.normal(0, 1.5, (n_anchors // 3, 4))
    near[:, 2:] = np.maximum(near[:, 2:], near[:, :2] + 2)
    anchors = np.vstack([near, _rand_boxes(rng, n_anchors - len(near))])
    near_r = gt + rng.normal(0, 2.5, (n_rois // 2, 4))
    near_r[:, 2:] = np.maximum(near_r[:, 2:], near_r[:, :2] + 2)
    rois = np.vstack([near_r, _rand_boxes(rng, n_rois - len(near_r))])
    bgs = tuple(BBox(*b) for b in _rand_boxes(rng, 2, 0, 70, 8, 20))
    label = "B" if rng.random() < 0.5 else "M"
    ann = StrongAnnotation(BBox(*gt), label, bgs)
    rule = AssignmentRule(negative=str(rng.choice(["max_iou_below", "background_box_overlap"])),
                          low_quality_matches=bool(rng.random() < 0.5))
    t = lambda a: torch.tensor(a, dtype=torch.float64, requires_grad=True)
    outputs = StrongOutputs(
        anchors=torch.tensor(anchors, dtype=torch.float64),
        rpn_logits=t(rng.normal(0, 2, n_anchors)),
        rpn_deltas=t(rng.normal(0, 0.3, (n_anchors, 4))),
        rois=torch.tensor(rois, dtype=torch.float64),
        cls_logits=t(rng.normal(0, 2, (n_rois, 3))),
        box_deltas=t(rng.normal(0, 0.5, (n_rois, 3, 4))),
    )
    weights = tuple(rng.uniform(0.5, 2.0, 3))
    return outputs, ann, rule, weights


def oracle_args(outputs, ann):
    return dict(
        anchors=outputs.anchors.tolist(), rpn_logits=outputs.rpn_logits.tolist(),
        rpn_deltas=outputs.rpn_deltas.tolist(), rois=outputs.rois.tolist(),
        cls_logits=outputs.cls_logits.tolist(), box_deltas=outputs.box_deltas.tolist(),
        gt=list(ann.moi_box.as_tuple()), label_index=ann.moi_label.index,
        bgs=[list(b.as_tuple()) for b in ann.background_boxes],
    )


def random_probs(rng, n):
    logits = rng.normal(0, 2, (n, 3))
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def R(box, probs):
    return RegionPrediction(BBox(*box), probs)


def random_detection_image(rng, normal=False):
    """Regions (about half jittered around the GT), annotation and the oracle's lesion tuple."""
    gx, gy = rng.uniform(10, 70, 2)
    gt_box = (gx, gy, gx + rng.uniform(12, 40), gy + rng.uniform(12, 40))
    k = int(rng.integers(1, 3))
    regions = []
    for p in random_probs(rng, int(rng.integers(0, 8))):
        if rng.random() < 0.5 and not normal:
            b = np.array(gt_box) + rng.normal(0, 4, 4)
            b[2:] = np.maximum(b[2:], b[:2] + 2)
        else:
            x, y = rng.uniform(0, 100, 2)
            b = (x, y, x + rng.uniform(5, 30), y + rng.uniform(5, 30))
        regions.append(R(tuple(float(v) for v in b), p))
    if normal:
        return regions, WeakAnnotation("N"), None
    return regions, StrongAnnotation(BBox(*gt_box), "BM"[k - 1]), (gt_box, k)


def as_dets(regions):
    return [(list(r.box.as_tuple()), list(r.probs)) for r in regions]
