import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from instances import random_probs
from jointdet.core_types import (BBox, DiagnosisLabel, ImageRecord, RegionPrediction,
                                 WeakAnnotation, iou)
from jointdet.data import SyntheticConfig, generate_synthetic
from jointdet.evaluation import postprocess
from jointdet.self_training import (PromotionConfig, promote, pseudo_moi, rank_for_promotion,
                                    sample_background_boxes, self_train, write_promotion_report)
from jointdet.training import TrainConfig

PIX = np.zeros((128, 128), np.uint8)


def _weak(i, label):
    return ImageRecord(f"w{i:05d}", PIX, WeakAnnotation(label), group=f"g{i}")


def _regions(rng, n):
    out = []
    for p in random_probs(rng, n):
        x, y = rng.uniform(0, 90, 2)
        out.append(RegionPrediction(BBox(x, y, x + rng.uniform(8, 30), y + rng.uniform(8, 30)), p))
    return out


def test_promotion_count_and_conservation():
    rng = np.random.default_rng(0)
    n = 4974
    records = [_weak(i, "B" if i % 2 else "M") for i in range(n)]
    # cheap shared region lists keep this fast
    pool = [_regions(rng, 3) for _ in range(50)]
    raw = [pool[i % 50] for i in range(n)]
    promoted, remaining, audit = promote(None, records, PromotionConfig(fraction=0.5), raw=raw)
    assert len(promoted) == 2487 == len(audit)
    assert len(promoted) + len(remaining) == n
    ids = {r.id for r in promoted}
    assert not ids & {r.id for r in remaining}
    assert ids | {r.id for r in remaining} == {r.id for r in records}
    assert all(r.is_strong for r in promoted) and not any(r.is_strong for r in remaining)


def test_ranking_matches_sort_oracle():
    rng = np.random.default_rng(1)
    records = [_weak(i, "B" if rng.random() < 0.5 else "M") for i in range(100)]
    raw = [_regions(rng, int(rng.integers(1, 6))) for _ in records]
    conf = []
    for rec, regs in zip(records, raw):
        k = rec.label.index
        if rec.label is DiagnosisLabel.B:
            best = max(range(len(regs)), key=lambda j: (regs[j].probs[1], -j))
        else:
            best = max(range(len(regs)), key=lambda j: (regs[j].probs[2], -j))
        conf.append(regs[best].probs[k])
    want = sorted(range(100), key=lambda i: -conf[i])[:30]
    promoted, _, audit = promote(None, records, PromotionConfig(fraction=0.3), raw=raw)
    assert {r.id for r in promoted} == {records[i].id for i in want}
    for a in audit:
        i = int(a.image_id[1:])
        assert a.confidence == conf[i]


def test_pseudo_moi_uses_label_specific_criterion():
    regs = [RegionPrediction(BBox(0, 0, 10, 10), (0.1, 0.6, 0.3)),
            RegionPrediction(BBox(20, 20, 30, 30), (0.1, 0.2, 0.7)),
            RegionPrediction(BBox(40, 40, 50, 50), (0.0, 0.8, 0.2))]
    assert pseudo_moi(regs, DiagnosisLabel.B) == (2, 0.8)
    assert pseudo_moi(regs, DiagnosisLabel.M) == (1, 0.7)
    assert pseudo_moi([], DiagnosisLabel.M) == (None, -math.inf)


def test_rank_is_stable_and_descending():
    assert rank_for_promotion([0.2, 0.9, 0.2, 0.5, -math.inf]) == [1, 3, 0, 2, 4]


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1, 1.5])
def test_fraction_outside_open_interval_rejected(fraction):
    with pytest.raises(ValueError):
        PromotionConfig(fraction=fraction)


def test_empty_or_strong_input_rejected():
    with pytest.raises(ValueError, match="empty"):
        promote(None, [], raw=[])
    m = generate_synthetic(SyntheticConfig(n_strong=1, seed=0))
    with pytest.raises(ValueError):
        promote(None, m.strong_train, raw=[[]])


def test_images_without_detections_rank_last():
    rng = np.random.default_rng(2)
    records = [_weak(i, "M") for i in range(10)]
    raw = [[] if i % 3 == 0 else _regions(rng, 2) for i in range(10)]
    promoted, remaining, _ = promote(None, records, PromotionConfig(fraction=0.6), raw=raw)
    assert len(promoted) == 6
    assert {r.id for r in remaining} == {f"w{i:05d}" for i in (0, 3, 6, 9)}


def test_background_boxes_avoid_detections():
    rng = np.random.default_rng(3)
    records = [_weak(i, "B" if i % 2 else "M") for i in range(40)]
    raw = [_regions(rng, 6) for _ in records]
    promoted, _, audit = promote(None, records, PromotionConfig(fraction=0.5, seed=1), raw=raw)
    for rec, a in zip(promoted, audit):
        regs = raw[int(rec.id[1:])]
        assert rec.annotation.moi_box == a.pseudo_box
        assert len(a.background_boxes) == 2
        kept = postprocess(regs, 0.5, 0.3).survivors
        for b in a.background_boxes:
            assert b.within(128, 128)
            assert iou(b, a.pseudo_box) == 0.0
            assert all(iou(b, r.box) == 0.0 for r in kept)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 100), st.floats(0, 100), st.floats(4, 27), st.floats(4, 27)),
                max_size=6), st.integers(0, 10_000))
def test_sampled_background_boxes_have_zero_iou(avoid, seed):
    boxes = [BBox(x, y, x + w, y + h) for x, y, w, h in avoid]
    out = sample_background_boxes(boxes, 128, 128, 3, np.random.default_rng(seed))
    assert len(out) <= 3
    for b in out:
        assert b.within(128, 128)
        assert all(iou(b, a) == 0.0 for a in boxes)


def test_perfect_model_pseudo_boxes_match_truth():
    m = generate_synthetic(SyntheticConfig(n_strong=1, n_weak=30, seed=4))
    rng = np.random.default_rng(4)
    raw = []
    for rec in m.weak_train:
        t = rec.truth
        onehot = [0.0, 0.0, 0.0]
        onehot[t.moi_label.index] = 1.0
        raw.append([RegionPrediction(t.moi_box, onehot)] + _regions(rng, 3))
    promoted, _, audit = promote(None, m.weak_train, PromotionConfig(fraction=0.5), raw=raw)
    truth = {r.id: r.truth for r in m.weak_train}
    for rec in promoted:
        assert iou(rec.annotation.moi_box, truth[rec.id].moi_box) > 0.5
    assert all(a.confidence == 1.0 for a in audit)


def test_promotion_report(tmp_path):
    rng = np.random.default_rng(5)
    records = [_weak(i, "M") for i in range(4)]
    _, _, audit = promote(None, records, PromotionConfig(fraction=0.5),
                          raw=[_regions(rng, 2) for _ in records])
    path = tmp_path / "promotions.jsonl"
    write_promotion_report(audit, path)
    lines = [json.loads(x) for x in path.read_text().splitlines()]
    assert len(lines) == 2
    assert set(lines[0]) == {"id", "label", "confidence", "pseudo_box", "background_boxes"}


def test_self_train_end_to_end_small():
    m = generate_synthetic(SyntheticConfig(n_strong=2, n_weak=4, n_test=3, seed=6))
    res = self_train(m, PromotionConfig(fraction=0.5), TrainConfig(iterations=3), resamples=200)
    assert res.rounds == [{"round": 1, "promoted": 2, "n_strong": 4, "n_weak": 2}]
    assert res.retrained.n_strong == 4 and res.retrained.n_weak == 2
    s = res.summary()
    assert {"initial_corloc", "retrained_corloc", "comparison", "n_promoted"} <= set(s)
    assert s["n_promoted"] == 2
