"""Dual-stream joint training: combined and alternating mini-batches."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .core_types import ImageRecord
from .data.augment import AugmentationPolicy, augment
from .data.manifest import DatasetManifest
from .detector import DetectorConfig, TwoStageDetector, partition_params, save_checkpoint
from .losses import (AssignmentRule, ClassWeights, MoICriterion, StrongLoss, StrongOutputs,
                     assign_roi_labels, assign_rpn_labels, inverse_frequency_weights, mil_loss,
                     sample_labels, strong_loss)

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("iteration", "stream", "L_rpn_cls", "L_rpn_reg", "L_frc_cls", "L_frc_reg",
                   "L_s", "L_ws", "alpha", "L")


@dataclass
class TrainConfig:
    batch_strong: int = 1
    batch_weak: int = 2
    lr: float = 5e-4
    lr_strong: float = 5e-4
    lr_weak: float = 5e-4
    alpha_init: float = 0.01
    alpha_schedule: str = "gradual_linear"
    alpha_static: float = 0.5
    variant: str = "combined"
    weight_decay: float = 5e-4
    iterations: int = 3000
    criterion: str = "most_malignant"
    negative_rule: str = "max_iou_below"
    low_quality_matches: bool = True
    region_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    image_weights: str | tuple = "inverse_frequency"
    rpn_batch: int = 64
    roi_batch: int = 32
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.batch_strong < 1 or self.batch_weak < 1:
            raise ValueError("batch sizes must be >= 1")
        if min(self.lr, self.lr_strong, self.lr_weak) <= 0:
            raise ValueError("learning rates must be positive")
        if self.alpha_schedule not in ("gradual_linear", "static"):
            raise ValueError(f"unknown alpha schedule {self.alpha_schedule!r}")
        if not 0.0 <= self.alpha_init <= 1.0 or not 0.0 <= self.alpha_static <= 1.0:
            raise ValueError("alpha values must lie in [0, 1]")
        if self.variant not in ("combined", "alternating"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        self.criterion = MoICriterion.parse(self.criterion).value
        self.region_weights = tuple(float(v) for v in self.region_weights)
        if not isinstance(self.image_weights, str):
            self.image_weights = tuple(float(v) for v in self.image_weights)
        self.rule  # validates the assignment rule

    @property
    def rule(self) -> AssignmentRule:
        return AssignmentRule(negative=self.negative_rule,
                              low_quality_matches=self.low_quality_matches)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["region_weights"] = list(self.region_weights)
        if not isinstance(self.image_weights, str):
            d["image_weights"] = list(self.image_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def alpha_at(iteration: int, config: TrainConfig) -> float:
    """Scale of the MIL loss at ``iteration``."""
    if not 0 <= iteration <= config.iterations:
        raise ValueError(f"iteration {iteration} outside [0, {config.iterations}]")
    if config.alpha_schedule == "static":
        return float(config.alpha_static)
    return config.alpha_init + (1.0 - config.alpha_init) * iteration / config.iterations


@dataclass
class TrainState:
    iteration: int = 0
    alpha: float = 0.0
    history: list[dict] = field(default_factory=list)
    checkpoint: str | None = None


class EpochSampler:
    """Cycles through a random permutation, reshuffling each epoch."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self._order: list[int] = []

    def take(self, k: int) -> list[int]:
        out = []
        while len(out) < k:
            if not self._order:
                self._order = list(self.rng.permutation(self.n))
            out.append(int(self._order.pop(0)))
        return out


def build_detector(config: DetectorConfig | None = None, seed: int = 0) -> TwoStageDetector:
    """Construct a detector whose initial weights depend only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return TwoStageDetector(config or DetectorConfig())


def forward_strong(model: TwoStageDetector, records: Sequence[ImageRecord], rule: AssignmentRule,
                   rng: np.random.Generator, rpn_batch: int = 64,
                   roi_batch: int = 32) -> list[StrongOutputs]:
    """Training-mode forward pass with anchor and ROI sampling."""
    x = model.prepare([r.pixels for r in records])
    feat = model.features(x)
    rpn_logits, rpn_deltas = model.rpn(feat)
    proposals = model.propose(rpn_logits, rpn_deltas)
    anchors = model.anchors
    a_indices, rois = [], []
    for rec, props in zip(records, proposals):
        ann = rec.annotation
        a_labels = assign_rpn_labels(anchors, ann, rule)
        a_indices.append(sample_labels(a_labels, rpn_batch, 0.5, rng))
        extra = [ann.moi_box.as_tuple(), *(b.as_tuple() for b in ann.background_boxes)]
        cand = torch.cat([props.boxes, torch.tensor(extra, dtype=props.boxes.dtype)])
        r_labels = assign_roi_labels(cand, ann, rule)
        r_idx = sample_labels(r_labels, roi_batch, 0.25, rng)
        rois.append(cand[torch.from_numpy(r_idx)])
    cls_logits, box_deltas = model.roi_forward(feat, rois)
    out, start = [], 0
    for i, r in enumerate(rois):
        n = len(r)
        out.append(StrongOutputs(anchors, rpn_logits[i], rpn_deltas[i], r,
                                 cls_logits[start:start + n], box_deltas[start:start + n],
                                 anchor_index=a_indices[i]))
        start += n
    return out


def forward_weak(model: TwoStageDetector, records: Sequence[ImageRecord]) -> list[torch.Tensor]:
    """Class probabilities of the top proposals of each image (before any threshold)."""
    x = model.prepare([r.pixels for r in records])
    feat = model.features(x)
    rpn_logits, rpn_deltas = model.rpn(feat)
    proposals = model.propose(rpn_logits, rpn_deltas)
    cls_logits, _ = model.roi_forward(feat, [p.boxes for p in proposals])
    probs = torch.softmax(cls_logits, dim=1)
    out, start = [], 0
    for p in proposals:
        out.append(probs[start:start + len(p)])
        start += len(p)
    return out


def _mean_strong(losses: list[StrongLoss]) -> StrongLoss:
    n = len(losses)
    return StrongLoss(*(sum(t) / n for t in zip(*losses)))


def _as_float(t) -> float:
    return float(t.detach()) if isinstance(t, torch.Tensor) else float(t)


class JointTrainer:
    """Owns the model parameters, the optimizers and both sampling streams.

    Each iteration performs exactly one optimizer update. In the combined
    variant the update uses ``L_s + alpha * L_ws``; in the alternating
    variant even iterations take a strong batch and odd iterations a weak
    batch. Weak-stream gradients never reach the ROI box-regression layer.
    """

    def __init__(self, model: TwoStageDetector, config: TrainConfig,
                 strong: Sequence[ImageRecord], weak: Sequence[ImageRecord] = ()):
        if not strong:
            raise ValueError("joint training needs at least one strongly annotated image")
        if any(not r.is_strong for r in strong) or any(r.is_strong for r in weak):
            raise ValueError("strong/weak streams received records of the wrong kind")
        self.model, self.config = model, config
        self.strong, self.weak = list(strong), list(weak)
        self.partition = partition_params(model)
        self.params = list(self.partition.groups["conv"].values()) + \
            list(self.partition.groups["rpn"].values()) + list(self.partition.groups["frcnn"].values())
        self.reg_ids = {id(p) for p in self.partition.reg_params()}
        self.non_reg = [p for p in self.params if id(p) not in self.reg_ids]
        self.rule = config.rule
        self.criterion = MoICriterion.parse(config.criterion)
        if isinstance(config.image_weights, str):
            image_w = inverse_frequency_weights([r.label for r in self.weak])
        else:
            image_w = config.image_weights
        self.weights = ClassWeights(region=config.region_weights, image=image_w)
        self.strong_rng = np.random.default_rng([config.seed, 1])
        self.weak_rng = np.random.default_rng([config.seed, 2])
        self.strong_sampler = EpochSampler(len(self.strong), self.strong_rng)
        self.strong_policy = AugmentationPolicy.for_stream("strong") if config.augment \
            else AugmentationPolicy.identity("strong")
        self.weak_policy = AugmentationPolicy.for_stream("weak") if config.augment \
            else AugmentationPolicy.identity("weak")
        wd = config.weight_decay
        if config.variant == "combined":
            self.optimizers = {"combined": torch.optim.Adam(self.params, lr=config.lr,
                                                            weight_decay=wd, fused=True)}
        else:
            self.optimizers = {
                "strong": torch.optim.Adam(self.params, lr=config.lr_strong, weight_decay=wd,
                                           fused=True),
                "weak": torch.optim.Adam(self.non_reg, lr=config.lr_weak, weight_decay=wd,
                                         fused=True),
            }
        self.state = TrainState(alpha=alpha_at(0, config))

    def current_alpha(self) -> float:
        # steps past the configured horizon keep the final value
        self.state.alpha = alpha_at(min(self.state.iteration, self.config.iterations), self.config)
        return self.state.alpha

    # sampling
    def next_strong_batch(self) -> list[ImageRecord]:
        idx = self.strong_sampler.take(self.config.batch_strong)
        return [augment(self.strong[i], self.strong_policy, self.strong_rng) for i in idx]

    def next_weak_batch(self) -> list[ImageRecord]:
        if not self.weak:
            return []
        idx = self.weak_rng.integers(len(self.weak), size=self.config.batch_weak)
        return [augment(self.weak[int(i)], self.weak_policy, self.weak_rng) for i in idx]

    # losses
    def compute_strong_loss(self, batch: Sequence[ImageRecord]) -> StrongLoss:
        outs = forward_strong(self.model, batch, self.rule, self.strong_rng,
                              self.config.rpn_batch, self.config.roi_batch)
        return _mean_strong([strong_loss(o, r.annotation, self.rule, self.weights)
                             for o, r in zip(outs, batch)])

    def compute_weak_loss(self, batch: Sequence[ImageRecord]) -> torch.Tensor:
        probs = forward_weak(self.model, batch)
        losses = [mil_loss(p, r.label, self.criterion, self.weights) for p, r in zip(probs, batch)]
        return sum(losses) / len(losses)

    # updates
    def _grads(self, loss, params):
        if not isinstance(loss, torch.Tensor) or not loss.requires_grad:
            return [None] * len(params)
        return list(torch.autograd.grad(loss, params, allow_unused=True))

    def _apply(self, optimizer, params, grads):
        for p, g in zip(params, grads):
            p.grad = g
        optimizer.step()
        for p in params:
            p.grad = None

    def _record(self, stream, ls: StrongLoss | None, lws, alpha, total):
        row = {"iteration": self.state.iteration, "stream": stream,
               "L_rpn_cls": _as_float(ls.rpn_cls) if ls else 0.0,
               "L_rpn_reg": _as_float(ls.rpn_reg) if ls else 0.0,
               "L_frc_cls": _as_float(ls.frc_cls) if ls else 0.0,
               "L_frc_reg": _as_float(ls.frc_reg) if ls else 0.0,
               "L_s": _as_float(ls.total) if ls else 0.0,
               "L_ws": _as_float(lws) if lws is not None else 0.0,
               "alpha": alpha, "L": _as_float(total)}
        self.state.history.append(row)
        self.state.iteration += 1
        return row

    def step_combined(self, strong_batch, weak_batch) -> dict:
        """One update with ``L_s + alpha * L_ws``; the regression layer sees only ``L_s``."""
        if not strong_batch:
            raise ValueError("a combined mini-batch needs strong images")
        alpha = self.current_alpha()
        ls = self.compute_strong_loss(strong_batch)
        g_s = self._grads(ls.total, self.params)
        lws = None
        total = ls.total
        if weak_batch:
            lws = self.compute_weak_loss(weak_batch)
            g_w = self._grads(alpha * lws, self.non_reg)
            weak_grad = dict(zip(map(id, self.non_reg), g_w))
            for k, p in enumerate(self.params):
                gw = weak_grad.get(id(p))
                if gw is not None:
                    g_s[k] = gw if g_s[k] is None else g_s[k] + gw
            total = ls.total + alpha * lws
        self._apply(self.optimizers["combined"], self.params, g_s)
        return self._record("combined", ls, lws, alpha, total)

    def step_alternating(self, batch, stream: str) -> dict:
        """One update from a single stream (``"strong"`` or ``"weak"``)."""
        alpha = self.current_alpha()
        if stream == "strong":
            ls = self.compute_strong_loss(batch)
            grads = self._grads(ls.total, self.params)
            self._apply(self.optimizers["strong"], self.params, grads)
            return self._record("strong", ls, None, alpha, ls.total)
        if stream == "weak":
            lws = self.compute_weak_loss(batch)
            grads = self._grads(alpha * lws, self.non_reg)
            self._apply(self.optimizers["weak"], self.non_reg, grads)
            return self._record("weak", None, lws, alpha, alpha * lws)
        raise ValueError(f"unknown stream {stream!r}")

    def step(self) -> dict:
        if self.config.variant == "combined":
            return self.step_combined(self.next_strong_batch(), self.next_weak_batch())
        if self.weak and self.state.iteration % 2 == 1:
            return self.step_alternating(self.next_weak_batch(), "weak")
        return self.step_alternating(self.next_strong_batch(), "strong")

    def run(self, iterations: int | None = None, log_every: int = 0) -> TrainState:
        n = self.config.iterations if iterations is None else iterations
        self.model.train()
        for _ in range(n):
            row = self.step()
            if log_every and row["iteration"] % log_every == 0:
                log.info("iter %d  L_s %.4f  L_ws %.4f  alpha %.3f", row["iteration"],
                         row["L_s"], row["L_ws"], row["alpha"])
        return self.state


def train_baseline(model: TwoStageDetector, strong: Sequence[ImageRecord], config: TrainConfig,
                   iterations: int | None = None) -> list[float]:
    """Plain strongly supervised training loop (no weak stream, no masking)."""
    if not strong:
        raise ValueError("baseline training needs strongly annotated images")
    rule = config.rule
    weights = ClassWeights(region=config.region_weights)
    rng = np.random.default_rng([config.seed, 1])
    sampler = EpochSampler(len(strong), rng)
    policy = AugmentationPolicy.for_stream("strong") if config.augment \
        else AugmentationPolicy.identity("strong")
    opt = torch.optim.Adam(model.parameters(), lr=config.lr_strong,
                           weight_decay=config.weight_decay, fused=True)
    model.train()
    losses = []
    for _ in range(config.iterations if iterations is None else iterations):
        batch = [augment(strong[i], policy, rng) for i in sampler.take(config.batch_strong)]
        outs = forward_strong(model, batch, rule, rng, config.rpn_batch, config.roi_batch)
        terms = [strong_loss(o, r.annotation, rule, weights) for o, r in zip(outs, batch)]
        loss = sum(t.total for t in terms) / len(terms)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    return losses


@dataclass
class TrainResult:
    model: TwoStageDetector
    config: TrainConfig
    state: TrainState
    n_strong: int
    n_weak: int

    @property
    def history(self) -> list[dict]:
        return self.state.history

    @property
    def run_label(self) -> str:
        return "strong-only baseline" if self.n_weak == 0 else f"joint ({self.config.variant})"

    def save(self, out_dir, extra: dict | None = None) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / "checkpoint.pt"
        save_checkpoint(self.model, ckpt, seed=self.config.seed,
                        extra={"train_config": self.config.to_dict(), **(extra or {})})
        write_history_csv(self.history, out / "loss_history.csv")
        self.state.checkpoint = str(ckpt)
        return ckpt


def write_history_csv(history: list[dict], path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})


def train(data: DatasetManifest | Sequence[ImageRecord], detector: TwoStageDetector | None = None,
          config: TrainConfig | None = None, detector_config: DetectorConfig | None = None,
          log_every: int = 0) -> TrainResult:
    """Train a detector on the training split of ``data``.

    With no weakly annotated training records this is plain strongly
    supervised training.
    """
    config = config or TrainConfig()
    records = data.records if isinstance(data, DatasetManifest) else list(data)
    records = [r for r in records if r.split == "train"]
    strong = [r for r in records if r.is_strong]
    weak = [r for r in records if not r.is_strong]
    if not strong:
        raise ValueError("no strongly annotated training records: the regression head "
                         "cannot be trained")
    if detector is None:
        detector = build_detector(detector_config, config.seed)
    trainer = JointTrainer(detector, config, strong, weak)
    state = trainer.run(log_every=log_every)
    return TrainResult(detector, config, state, len(strong), len(weak))


def dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
