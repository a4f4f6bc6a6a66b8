import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from instances import oracle_args, random_probs, strong_instance
from jointdet.core_types import BBox, DiagnosisLabel, RegionPrediction, StrongAnnotation
from jointdet.losses import (IGNORE, NEGATIVE, POSITIVE, AssignmentRule, ClassWeights,
                             MoICriterion, StrongOutputs, assign_rpn_labels,
                             image_level_prediction, inverse_frequency_weights, mil_loss,
                             sample_labels, select_moi, strong_loss)

CRITERIA = [c.value for c in MoICriterion]


def central_diff(fn, x, h=1e-6):
    g = torch.zeros_like(x)
    flat = x.detach().reshape(-1)
    for i in range(flat.numel()):
        plus, minus = flat.clone(), flat.clone()
        plus[i] += h
        minus[i] -= h
        g.view(-1)[i] = (fn(plus.view_as(x)) - fn(minus.view_as(x))) / (2 * h)
    return g


def rel_err(a, b):
    return float((a - b).norm() / max(float(b.norm()), 1e-12))


# label assignment

ANN = StrongAnnotation(BBox(10, 10, 30, 30), "M", (BBox(50, 50, 60, 60),))


def test_rpn_assignment_examples():
    assert assign_rpn_labels([ANN.moi_box], ANN)[0] == POSITIVE
    # 80 of its 100 px^2 inside the background box
    inside = BBox(52, 50, 62, 60)
    rule = AssignmentRule(negative="background_box_overlap")
    assert assign_rpn_labels([inside], ANN, rule)[0] == NEGATIVE
    # IoU exactly 0.5 against the MoI: between the thresholds
    half = BBox(10, 10, 30, 20)
    assert assign_rpn_labels([half], ANN, AssignmentRule())[0] == IGNORE
    far = BBox(80, 80, 90, 90)
    assert assign_rpn_labels([far], ANN, AssignmentRule())[0] == NEGATIVE
    assert assign_rpn_labels([far], ANN, rule)[0] == IGNORE


def test_low_quality_match_promotes_best_anchor():
    weak = [BBox(10, 10, 22, 30), BBox(0, 0, 5, 5)]
    assert list(assign_rpn_labels(weak, ANN)) == [IGNORE, NEGATIVE]
    rule = AssignmentRule(low_quality_matches=True)
    assert list(assign_rpn_labels(weak, ANN, rule)) == [POSITIVE, NEGATIVE]


@pytest.mark.parametrize("field,value", [("positive_iou", 1.0), ("negative_iou", 0.0),
                                         ("negative", "nope")])
def test_assignment_rule_validated(field, value):
    with pytest.raises(ValueError):
        AssignmentRule(**{field: value})


def test_sample_labels_balance():
    labels = np.array([1] * 10 + [0] * 100 + [-1] * 5)
    idx = sample_labels(labels, 32, 0.25, np.random.default_rng(0))
    assert len(idx) == 32 and (labels[idx] == 1).sum() == 8 and (labels[idx] >= 0).all()


# strong loss

def test_strong_loss_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    for _ in range(60):
        outputs, ann, rule, w = strong_instance(rng)
        got = strong_loss(outputs, ann, rule, ClassWeights(region=w))
        want = oracles.strong_loss(**oracle_args(outputs, ann), rule=rule, region_weights=w)
        for g, e in zip(got, want):
            assert float(g.detach()) == pytest.approx(e, rel=1e-6, abs=1e-12)


def test_strong_loss_with_sampled_indices_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        outputs, ann, rule, w = strong_instance(rng)
        args = oracle_args(outputs, ann)
        a_lab = oracles.rpn_labels(args["anchors"], args["gt"], args["bgs"], rule)
        r_lab = oracles.roi_labels(args["rois"], args["gt"], args["label_index"], args["bgs"], rule)
        # subsample the labelled entries, as the trainer does
        a_idx = sorted(rng.permutation([i for i, v in enumerate(a_lab) if v >= 0])[:4].tolist())
        r_idx = sorted(rng.permutation([i for i, v in enumerate(r_lab) if v >= 0])[:3].tolist())
        outputs.anchor_index = np.array(a_idx, dtype=np.int64)
        outputs.roi_index = np.array(r_idx, dtype=np.int64)
        got = strong_loss(outputs, ann, rule, ClassWeights(region=w))
        want = oracles.strong_loss(**args, rule=rule, region_weights=w,
                                   anchor_index=a_idx, roi_index=r_idx)
        assert float(got.total.detach()) == pytest.approx(want[4], rel=1e-6, abs=1e-12)


def test_total_is_unweighted_sum():
    outputs, ann, rule, w = strong_instance(np.random.default_rng(2))
    loss = strong_loss(outputs, ann, rule)
    assert float(loss.total.detach()) == pytest.approx(float(sum(loss[:4]).detach()), rel=1e-12)


def test_perfect_prediction_has_tiny_loss():
    gt = (10.0, 10.0, 30.0, 30.0)
    ann = StrongAnnotation(BBox(*gt), "B")
    anchors = torch.tensor([gt, (60, 60, 80, 80)], dtype=torch.float64)
    out = StrongOutputs(anchors=anchors,
                        rpn_logits=torch.tensor([30.0, -30.0], dtype=torch.float64),
                        rpn_deltas=torch.zeros(2, 4, dtype=torch.float64),
                        rois=anchors.clone(),
                        cls_logits=torch.tensor([[-30.0, 30.0, -30.0], [30.0, -30.0, -30.0]],
                                                dtype=torch.float64),
                        box_deltas=torch.zeros(2, 3, 4, dtype=torch.float64))
    assert float(strong_loss(out, ann).total) < 1e-3


def test_doubling_a_class_weight_doubles_its_contribution():
    outputs, ann, rule, _ = strong_instance(np.random.default_rng(3))
    base = float(strong_loss(outputs, ann, rule, ClassWeights(region=(1, 1, 1))).frc_cls)
    parts = []
    for k in range(3):
        w = [0.0 + 1e-300] * 3
        w[k] = 1.0
        parts.append(float(strong_loss(outputs, ann, rule, ClassWeights(region=w)).frc_cls))
    assert sum(parts) == pytest.approx(base, rel=1e-9)
    for k in range(3):
        w = [1.0, 1.0, 1.0]
        w[k] = 2.0
        doubled = float(strong_loss(outputs, ann, rule, ClassWeights(region=w)).frc_cls)
        assert doubled - base == pytest.approx(parts[k], rel=1e-9, abs=1e-12)


def test_no_positives_gives_zero_regression_with_classification():
    ann = StrongAnnotation(BBox(10, 10, 30, 30), "M")
    far = torch.tensor([[70.0, 70.0, 90.0, 90.0]], dtype=torch.float64)
    out = StrongOutputs(anchors=far, rpn_logits=torch.zeros(1, dtype=torch.float64, requires_grad=True),
                        rpn_deltas=torch.ones(1, 4, dtype=torch.float64, requires_grad=True),
                        rois=far, cls_logits=torch.zeros(1, 3, dtype=torch.float64, requires_grad=True),
                        box_deltas=torch.ones(1, 3, 4, dtype=torch.float64, requires_grad=True))
    loss = strong_loss(out, ann)
    assert float(loss.rpn_reg) == 0.0 and float(loss.frc_reg) == 0.0
    assert float(loss.frc_cls) == pytest.approx(math.log(3))
    loss.total.backward()
    assert torch.count_nonzero(out.box_deltas.grad) == 0


def test_all_ignore_gives_zero_regression_gradient():
    ann = StrongAnnotation(BBox(10, 10, 30, 30), "M")
    # IoU 0.4 with the MoI and no background boxes: ignored by both stages
    rule = AssignmentRule(negative="background_box_overlap")
    mid = torch.tensor([[10.0, 10.0, 30.0, 18.0]], dtype=torch.float64)
    out = StrongOutputs(anchors=mid, rpn_logits=torch.zeros(1, dtype=torch.float64, requires_grad=True),
                        rpn_deltas=torch.ones(1, 4, dtype=torch.float64, requires_grad=True),
                        rois=mid, cls_logits=torch.zeros(1, 3, dtype=torch.float64, requires_grad=True),
                        box_deltas=torch.ones(1, 3, 4, dtype=torch.float64, requires_grad=True))
    loss = strong_loss(out, ann, rule)
    loss.total.backward()
    assert float(loss.total.detach()) == 0.0
    assert torch.count_nonzero(out.box_deltas.grad) == 0


@pytest.mark.parametrize("term", ["rpn_cls", "rpn_reg", "frc_cls", "frc_reg"])
def test_strong_terms_match_finite_differences(term):
    rng = np.random.default_rng(4)
    for _ in range(20):
        outputs, ann, rule, w = strong_instance(rng)
        weights = ClassWeights(region=w)
        loss = getattr(strong_loss(outputs, ann, rule, weights), term)
        inputs = ["rpn_logits", "rpn_deltas"] if term.startswith("rpn") else ["cls_logits", "box_deltas"]
        for name in inputs:
            x = getattr(outputs, name)
            (auto,) = torch.autograd.grad(loss, x, retain_graph=True, allow_unused=True)
            auto = torch.zeros_like(x) if auto is None else auto

            def f(v, name=name):
                o = StrongOutputs(**{**outputs.__dict__, name: v})
                return float(getattr(strong_loss(o, ann, rule, weights), term))

            fd = central_diff(f, x)
            if fd.norm() == 0:
                assert auto.norm() == 0
            else:
                assert rel_err(auto, fd) < 1e-4


# MoI selection and MIL

def test_moi_example():
    probs = [(0.1, 0.2, 0.7), (0.2, 0.6, 0.2)]
    regions = [RegionPrediction(BBox(0, 0, 5, 5), p) for p in probs]
    P, idx = image_level_prediction(regions, "M", "most_malignant")
    assert idx == 0 and P == pytest.approx((0.1, 0.2, 0.7))
    P, idx = image_level_prediction(regions[1:], "B", "most_malignant")
    assert idx == 0 and P == pytest.approx((0.2, 0.6, 0.2))


def test_empty_region_set_falls_back_to_uniform():
    P, idx = image_level_prediction([], "B")
    assert idx is None and P == pytest.approx((1 / 3,) * 3)
    assert mil_loss([], "B") == pytest.approx(math.log(3))
    t = mil_loss(torch.zeros(0, 3, dtype=torch.float64), "M")
    assert float(t) == pytest.approx(math.log(3))


@pytest.mark.parametrize("criterion", CRITERIA)
def test_selection_matches_exhaustive_scan(criterion):
    rng = np.random.default_rng(5)
    for _ in range(200):
        probs = random_probs(rng, int(rng.integers(1, 50)))
        for label in "NBM":
            assert select_moi(probs, label, criterion) == oracles.moi_index(probs.tolist(), label, criterion)


def test_label_m_always_most_malignant():
    rng = np.random.default_rng(6)
    probs = random_probs(rng, 30)
    for c in CRITERIA:
        assert select_moi(probs, "M", c) == int(np.argmax(probs[:, 2]))


def test_ties_go_to_lowest_index():
    probs = np.array([[0.2, 0.4, 0.4], [0.2, 0.4, 0.4], [0.6, 0.2, 0.2]])
    for c in CRITERIA:
        assert select_moi(probs, "B", c) == 0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(CRITERIA), st.sampled_from("NBM"))
def test_selection_invariances(seed, criterion, label):
    rng = np.random.default_rng(seed)
    probs = random_probs(rng, 20)
    i = select_moi(probs, label, criterion)
    perm = rng.permutation(20)
    assert perm[select_moi(probs[perm], label, criterion)] == i
    # a strictly increasing map of every score leaves the argmax alone
    assert select_moi(probs ** 3 + 0.5 * probs, label, criterion) == i


def test_criterion_parse():
    assert MoICriterion.parse("malignant") is MoICriterion.MOST_MALIGNANT
    assert MoICriterion.parse("most_abnormal") is MoICriterion.MOST_ABNORMAL
    with pytest.raises(ValueError):
        MoICriterion.parse("loudest")


def test_mil_examples():
    one_hot = [RegionPrediction(BBox(0, 0, 5, 5), (0.0, 0.0, 1.0))]
    assert mil_loss(one_hot, "M") == 0.0
    half = [RegionPrediction(BBox(0, 0, 5, 5), (0.25, 0.25, 0.5))]
    assert mil_loss(half, "M") == pytest.approx(0.6931, abs=1e-4)
    assert mil_loss(half, "M") == pytest.approx(math.log(2))


def test_mil_clamps_log_argument():
    probs = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
    assert float(mil_loss(probs, "M")) == pytest.approx(-math.log(1e-12))


def test_mil_matches_oracle_and_weight_scaling():
    rng = np.random.default_rng(7)
    for _ in range(100):
        probs = random_probs(rng, 10)
        label = str(rng.choice(list("NBM")))
        crit = str(rng.choice(CRITERIA))
        w = tuple(rng.uniform(0.2, 3, 3))
        got = float(mil_loss(torch.tensor(probs), label, crit, ClassWeights(image=w)))
        want = oracles.mil_loss(probs.tolist(), label, crit, w)
        assert got == pytest.approx(want, rel=1e-9)
        assert got >= 0
        scaled = float(mil_loss(torch.tensor(probs), label, crit,
                                ClassWeights(image=tuple(3.5 * v for v in w))))
        assert scaled == pytest.approx(3.5 * got, rel=1e-12)


def test_mil_gradient_through_softmax_matches_finite_differences():
    rng = np.random.default_rng(8)
    for _ in range(20):
        logits = torch.tensor(rng.normal(0, 1.5, (12, 3)), dtype=torch.float64, requires_grad=True)
        label = str(rng.choice(list("NBM")))
        crit = str(rng.choice(CRITERIA))
        w = ClassWeights(image=tuple(rng.uniform(0.5, 2, 3)))
        probs = torch.softmax(logits, dim=1)
        idx = select_moi(probs, label, crit)
        loss = mil_loss(probs, label, crit, w)
        (auto,) = torch.autograd.grad(loss, logits)
        k = DiagnosisLabel(label).index

        def f(v):
            # selection index held fixed
            return float(-w.image[k] * torch.log(torch.softmax(v, dim=1)[idx, k]))

        assert rel_err(auto, central_diff(f, logits)) < 1e-4
        # only the selected region receives gradient
        mask = torch.ones(12, dtype=torch.bool)
        mask[idx] = False
        assert torch.count_nonzero(auto[mask]) == 0


def test_inverse_frequency_weights():
    labels = ["B"] * 30 + ["M"] * 10
    w = inverse_frequency_weights(labels)
    assert w[0] == 1.0
    assert np.mean(w[1:]) == pytest.approx(1.0)
    assert w[2] / w[1] == pytest.approx(3.0)
    assert inverse_frequency_weights([]) == (1.0, 1.0, 1.0)


def test_class_weights_validated():
    with pytest.raises(ValueError):
        ClassWeights(region=(1, 0, 1))
    with pytest.raises(ValueError):
        ClassWeights(image=(1, 1))
