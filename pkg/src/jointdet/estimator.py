"""Estimator-style wrappers around training, detection and self-training.

Samples are :class:`ImageRecord` objects; their annotations play the role of
``y``, so ``fit`` takes no separate target.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator, clone
from sklearn.exceptions import NotFittedError

from .core_types import ImageRecord, StrongAnnotation
from .data.manifest import DatasetManifest
from .detector import DetectorConfig, TwoStageDetector
from .evaluation import (CORLOC_PROB, DetectionResult, RawResult, corloc, postprocess,
                         raw_results)
from .self_training import PromotionConfig, promote
from .training import TrainConfig, TrainResult, train

_TRAIN_KEYS = tuple(k for k in TrainConfig.__dataclass_fields__)


def check_records(X, *, split: str | None = None, require_strong: bool = False,
                  size: tuple[int, int] | None = None) -> list[ImageRecord]:
    """Validate and normalise ``X`` to a list of records.

    ``X`` may be a :class:`DatasetManifest` or any sequence of records.
    """
    if isinstance(X, DatasetManifest):
        records = list(X.records)
    elif isinstance(X, ImageRecord):
        raise TypeError("expected a collection of ImageRecord, got a single record")
    else:
        try:
            records = list(X)
        except TypeError:
            raise TypeError(f"expected a manifest or a sequence of ImageRecord, "
                            f"got {type(X).__name__}") from None
    bad = [type(r).__name__ for r in records if not isinstance(r, ImageRecord)]
    if bad:
        raise TypeError(f"expected ImageRecord items, got {bad[0]}")
    if split is not None:
        records = [r for r in records if r.split == split]
    if not records:
        raise ValueError("no records to process")
    if size is not None:
        wrong = [r.id for r in records if (r.height, r.width) != tuple(size)]
        if wrong:
            raise ValueError(f"record {wrong[0]} does not match the input size {tuple(size)}")
    if require_strong and not any(r.is_strong for r in records):
        raise ValueError("need at least one strongly annotated record")
    return records


def check_is_fitted(est):
    if getattr(est, "model_", None) is None:
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")


class JointDetector(BaseEstimator):
    """Two-stage mass detector trained jointly on strong and weak records."""

    def __init__(self, backbone: str = "small", input_size: tuple[int, int] = (128, 128),
                 variant: str = "combined", criterion: str = "most_malignant",
                 alpha_schedule: str = "gradual_linear", alpha_init: float = 0.01,
                 alpha_static: float = 0.5, iterations: int = 3000, lr: float = 5e-4,
                 lr_strong: float = 5e-4, lr_weak: float = 5e-4, weight_decay: float = 5e-4,
                 batch_strong: int = 1, batch_weak: int = 2,
                 negative_rule: str = "max_iou_below", augment: bool = True,
                 prob_threshold: float = CORLOC_PROB, nms_iou: float = 0.3, seed: int = 0):
        self.backbone = backbone
        self.input_size = input_size
        self.variant = variant
        self.criterion = criterion
        self.alpha_schedule = alpha_schedule
        self.alpha_init = alpha_init
        self.alpha_static = alpha_static
        self.iterations = iterations
        self.lr = lr
        self.lr_strong = lr_strong
        self.lr_weak = lr_weak
        self.weight_decay = weight_decay
        self.batch_strong = batch_strong
        self.batch_weak = batch_weak
        self.negative_rule = negative_rule
        self.augment = augment
        self.prob_threshold = prob_threshold
        self.nms_iou = nms_iou
        self.seed = seed

    def train_config(self) -> TrainConfig:
        params = self.get_params()
        return TrainConfig(**{k: v for k, v in params.items() if k in _TRAIN_KEYS})

    def detector_config(self) -> DetectorConfig:
        return DetectorConfig(backbone=self.backbone, input_size=self.input_size)

    def fit(self, X, y=None):
        records = check_records(X, split="train", require_strong=True, size=self.input_size)
        result = train(records, config=self.train_config(),
                       detector_config=self.detector_config())
        self._set_fitted(result)
        return self

    def _set_fitted(self, result: TrainResult):
        self.result_ = result
        self.model_: TwoStageDetector = result.model
        self.history_ = result.history
        self.n_strong_ = result.n_strong
        self.n_weak_ = result.n_weak

    @classmethod
    def from_model(cls, model: TwoStageDetector, **params) -> "JointDetector":
        """Wrap an already trained detector."""
        est = cls(backbone=model.config.backbone, input_size=model.config.input_size, **params)
        est.model_ = model
        return est

    def predict_raw(self, X) -> list[RawResult]:
        check_is_fitted(self)
        return raw_results(self.model_, check_records(X, size=self.input_size))

    def predict(self, X) -> list[DetectionResult]:
        """Thresholded, NMS-filtered detections per record."""
        return [postprocess(r.regions, self.prob_threshold, self.nms_iou, r.image_id, r.gt)
                for r in self.predict_raw(X)]

    def score(self, X, y=None) -> float:
        """CorLoc over the records with a boxed ground truth."""
        records = [r for r in check_records(X, size=self.input_size)
                   if isinstance(r.annotation, StrongAnnotation)]
        if not records:
            raise ValueError("scoring needs records with boxed ground truth")
        return corloc(self.predict(records))


class SelfTrainingDetector(BaseEstimator):
    """Fit ``estimator``, promote part of the weak pool, refit from scratch."""

    def __init__(self, estimator: JointDetector | None = None, fraction: float = 0.5,
                 n_background_boxes: int = 2, rounds: int = 1, seed: int = 0):
        self.estimator = estimator
        self.fraction = fraction
        self.n_background_boxes = n_background_boxes
        self.rounds = rounds
        self.seed = seed

    def promotion_config(self) -> PromotionConfig:
        return PromotionConfig(fraction=self.fraction, n_background_boxes=self.n_background_boxes,
                               rounds=self.rounds, seed=self.seed)

    def fit(self, X, y=None):
        cfg = self.promotion_config()
        base = self.estimator if self.estimator is not None else JointDetector()
        records = check_records(X, split="train", require_strong=True, size=base.input_size)
        strong = [r for r in records if r.is_strong]
        weak = [r for r in records if not r.is_strong]
        if not weak:
            raise ValueError("self-training needs weakly annotated records")
        self.initial_estimator_ = clone(base).fit(records)
        current = self.initial_estimator_
        self.promotions_ = []
        for _ in range(cfg.rounds):
            new_strong, weak, audit = promote(current.model_, weak, cfg)
            strong = strong + new_strong
            self.promotions_ += audit
            current = clone(base).fit(strong + weak)
            if not weak:
                break
        self.estimator_ = current
        self.model_ = current.model_
        return self

    def predict_raw(self, X) -> list[RawResult]:
        check_is_fitted(self)
        return self.estimator_.predict_raw(X)

    def predict(self, X) -> list[DetectionResult]:
        check_is_fitted(self)
        return self.estimator_.predict(X)

    def score(self, X, y=None) -> float:
        check_is_fitted(self)
        return self.estimator_.score(X)

