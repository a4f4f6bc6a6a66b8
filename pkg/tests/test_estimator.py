import numpy as np
import pytest
import torch
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from jointdet import JointDetector, SelfTrainingDetector
from jointdet.core_types import ImageRecord, WeakAnnotation
from jointdet.data import SyntheticConfig, generate_synthetic
from jointdet.estimator import check_records
from jointdet.training import TrainConfig, train


@pytest.fixture(scope="module")
def manifest():
    return generate_synthetic(SyntheticConfig(n_strong=2, n_weak=4, n_test=3, seed=21))


def test_params_round_trip_and_clone():
    est = JointDetector(iterations=7, variant="alternating", seed=3)
    p = est.get_params()
    assert p["iterations"] == 7 and p["variant"] == "alternating" and p["seed"] == 3
    c = clone(est)
    assert c.get_params() == p and c is not est
    est.set_params(lr=1e-3)
    assert est.lr == 1e-3
    cfg = est.train_config()
    assert cfg.variant == "alternating" and cfg.lr == 1e-3 and cfg.iterations == 7
    nested = SelfTrainingDetector(JointDetector(iterations=2), fraction=0.25)
    assert nested.get_params()["estimator__iterations"] == 2


def test_bad_hyperparameters_surface_at_fit(manifest):
    with pytest.raises(ValueError):
        JointDetector(variant="sometimes").fit(manifest)


def test_check_records_validation(manifest):
    assert len(check_records(manifest)) == len(manifest.records)
    assert len(check_records(manifest, split="test")) == 3
    with pytest.raises(TypeError, match="single record"):
        check_records(manifest.records[0])
    with pytest.raises(TypeError):
        check_records([1, 2])
    with pytest.raises(TypeError):
        check_records(5)
    with pytest.raises(ValueError, match="no records"):
        check_records([])
    with pytest.raises(ValueError, match="input size"):
        check_records(manifest, size=(64, 64))
    with pytest.raises(ValueError, match="strongly"):
        check_records(manifest.weak_train, require_strong=True)


def test_unfitted_estimators_refuse_to_predict(manifest):
    with pytest.raises(NotFittedError):
        JointDetector().predict(manifest.test)
    with pytest.raises(NotFittedError):
        SelfTrainingDetector().score(manifest.test)


def test_fit_matches_functional_training(manifest):
    est = JointDetector(iterations=3, seed=5).fit(manifest)
    ref = train(manifest, config=TrainConfig(iterations=3, seed=5))
    for (k, a), b in zip(est.model_.state_dict().items(), ref.model.state_dict().values()):
        assert torch.equal(a, b), k
    assert (est.n_strong_, est.n_weak_) == (2, 4)
    assert len(est.history_) == 3
    dets = est.predict(manifest.test)
    assert [d.image_id for d in dets] == [r.id for r in manifest.test]
    assert 0.0 <= est.score(manifest.test) <= 1.0
    with pytest.raises(ValueError, match="boxed"):
        est.score(manifest.weak_train)


def test_from_model_wraps_a_trained_detector(manifest):
    ref = train(manifest, config=TrainConfig(iterations=2))
    est = JointDetector.from_model(ref.model, prob_threshold=0.3)
    raw = est.predict_raw(manifest.test)
    assert len(raw) == 3 and est.prob_threshold == 0.3


def test_self_training_estimator(manifest):
    st = SelfTrainingDetector(JointDetector(iterations=2), fraction=0.5).fit(manifest)
    assert len(st.promotions_) == 2
    assert st.estimator_.n_strong_ == 4 and st.estimator_.n_weak_ == 2
    assert st.initial_estimator_.n_strong_ == 2
    assert 0.0 <= st.score(manifest.test) <= 1.0


def test_self_training_needs_weak_records(manifest):
    with pytest.raises(ValueError, match="weakly"):
        SelfTrainingDetector(JointDetector(iterations=1)).fit(manifest.strong_train)


def test_fit_rejects_weak_only(manifest):
    weak = [ImageRecord("w", np.zeros((128, 128), np.uint8), WeakAnnotation("B"))]
    with pytest.raises(ValueError, match="strongly"):
        JointDetector(iterations=1).fit(weak)
