"""Small two-stage detector: shared conv backbone, RPN and ROI head.

Parameters are grouped by module prefix so the joint trainer can tell the
shared convolutional layers, the RPN and the ROI head apart, and can keep
the ROI box-regression output layer out of weak-stream updates.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import nms as tv_nms

from .core_types import BBox, RegionPrediction

ROI_BOX_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
RPN_BOX_WEIGHTS = (1.0, 1.0, 1.0, 1.0)
_DELTA_CLAMP = math.log(1000.0 / 16)

BACKBONE_PRESETS = {
    "small": (8, 16, 32, 64),
    "large": (8, 16, 32, 64, 64, 64, 64, 64),
}


@dataclass
class DetectorConfig:
    backbone: str = "small"
    input_size: tuple[int, int] = (128, 128)
    feature_stride: int = 8
    anchor_scales: tuple[float, ...] = (16.0, 32.0, 64.0)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    pre_nms: int = 300
    post_nms: int = 8
    rpn_nms_iou: float = 0.7
    min_proposal_size: float = 2.0
    roi_size: int = 7
    hidden_width: int = 512
    num_classes: int = 3

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.anchor_scales = tuple(float(v) for v in self.anchor_scales)
        self.anchor_ratios = tuple(float(v) for v in self.anchor_ratios)
        if self.backbone not in BACKBONE_PRESETS:
            raise ValueError(f"unknown backbone preset {self.backbone!r}")
        if self.post_nms > self.pre_nms:
            raise ValueError("post_nms must not exceed pre_nms")
        if not self.anchor_scales or not self.anchor_ratios:
            raise ValueError("need at least one anchor shape")
        if self.feature_stride != 8:
            raise ValueError("the backbone presets have a fixed stride of 8")
        if self.num_classes != 3:
            raise ValueError("the region class set is {background, benign, malignant}")
        if any(s % self.feature_stride for s in self.input_size):
            raise ValueError("input size must be a multiple of the feature stride")

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("input_size", "anchor_scales", "anchor_ratios"):
            d[k] = list(d[k])
        return d


def encode_boxes(reference: torch.Tensor, target: torch.Tensor, weights=RPN_BOX_WEIGHTS) -> torch.Tensor:
    """(centre, log-size) offsets taking ``reference`` boxes onto ``target``."""
    wx, wy, ww, wh = weights
    rw = reference[:, 2] - reference[:, 0]
    rh = reference[:, 3] - reference[:, 1]
    rx = reference[:, 0] + 0.5 * rw
    ry = reference[:, 1] + 0.5 * rh
    tw = target[:, 2] - target[:, 0]
    th = target[:, 3] - target[:, 1]
    tx = target[:, 0] + 0.5 * tw
    ty = target[:, 1] + 0.5 * th
    return torch.stack([wx * (tx - rx) / rw, wy * (ty - ry) / rh,
                        ww * torch.log(tw / rw), wh * torch.log(th / rh)], dim=1)


def decode_boxes(reference: torch.Tensor, deltas: torch.Tensor, weights=RPN_BOX_WEIGHTS) -> torch.Tensor:
    wx, wy, ww, wh = weights
    rw = reference[:, 2] - reference[:, 0]
    rh = reference[:, 3] - reference[:, 1]
    rx = reference[:, 0] + 0.5 * rw
    ry = reference[:, 1] + 0.5 * rh
    dx, dy = deltas[:, 0] / wx, deltas[:, 1] / wy
    dw = (deltas[:, 2] / ww).clamp(max=_DELTA_CLAMP)
    dh = (deltas[:, 3] / wh).clamp(max=_DELTA_CLAMP)
    cx, cy = rx + dx * rw, ry + dy * rh
    w, h = rw * torch.exp(dw), rh * torch.exp(dh)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def clip_boxes(boxes: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    h, w = size
    x = boxes[:, 0::2].clamp(0, w)
    y = boxes[:, 1::2].clamp(0, h)
    return torch.stack([x[:, 0], y[:, 0], x[:, 1], y[:, 1]], dim=1)


def make_anchors(config: DetectorConfig) -> torch.Tensor:
    """Anchors for every feature cell, cell-major then shape, as ``(A, 4)``."""
    h, w = config.input_size
    s = config.feature_stride
    shapes = []
    for scale in config.anchor_scales:
        for ratio in config.anchor_ratios:
            # ratio = height / width, area = scale**2
            aw = scale / math.sqrt(ratio)
            ah = scale * math.sqrt(ratio)
            shapes.append((aw, ah))
    shapes = torch.tensor(shapes, dtype=torch.float32)
    cy, cx = torch.meshgrid((torch.arange(h // s) + 0.5) * s, (torch.arange(w // s) + 0.5) * s,
                            indexing="ij")
    centres = torch.stack([cx.reshape(-1), cy.reshape(-1)], 1)
    half = shapes / 2
    lo = centres[:, None, :] - half[None]
    hi = centres[:, None, :] + half[None]
    return torch.cat([lo, hi], dim=2).reshape(-1, 4)


def _block(cin, cout, stride=1):
    return [nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(inplace=True)]


class Backbone(nn.Module):
    def __init__(self, preset: str):
        super().__init__()
        chans = BACKBONE_PRESETS[preset]
        layers, cin = [], 1
        for k, cout in enumerate(chans):
            layers += _block(cin, cout, stride=2 if k == 0 else 1)
            if k in (1, 2):
                layers.append(nn.MaxPool2d(2))
            cin = cout
        self.body = nn.Sequential(*layers)
        self.out_channels = cin

    def forward(self, x):
        return self.body(x)


class RPNHead(nn.Module):
    def __init__(self, channels: int, num_anchors: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.cls_logits = nn.Conv2d(channels, num_anchors, 1)
        self.bbox_pred = nn.Conv2d(channels, num_anchors * 4, 1)
        for layer in (self.conv, self.cls_logits, self.bbox_pred):
            nn.init.normal_(layer.weight, std=0.01)
            nn.init.zeros_(layer.bias)

    def forward(self, feat):
        t = F.relu(self.conv(feat))
        n = feat.shape[0]
        logits = self.cls_logits(t).permute(0, 2, 3, 1).reshape(n, -1)
        deltas = self.bbox_pred(t).permute(0, 2, 3, 1).reshape(n, -1, 4)
        return logits, deltas


class ROIHead(nn.Module):
    def __init__(self, channels: int, roi_size: int, hidden: int, num_classes: int):
        super().__init__()
        self.fc1 = nn.Linear(channels * roi_size * roi_size, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.cls_score = nn.Linear(hidden, num_classes)
        self.bbox_pred = nn.Linear(hidden, num_classes * 4)
        nn.init.normal_(self.cls_score.weight, std=0.01)
        nn.init.zeros_(self.cls_score.bias)
        nn.init.normal_(self.bbox_pred.weight, std=0.001)
        nn.init.zeros_(self.bbox_pred.bias)
        self.num_classes = num_classes

    def forward(self, pooled):
        x = F.relu(self.fc1(pooled.flatten(1)))
        x = F.relu(self.fc2(x))
        return self.cls_score(x), self.bbox_pred(x).reshape(-1, self.num_classes, 4)


def roi_pool(feat: torch.Tensor, rois: torch.Tensor, batch_index: torch.Tensor,
             out: int, stride: int) -> torch.Tensor:
    """Bilinear ROI sampling on a ``out x out`` grid of bin centres."""
    h, w = feat.shape[-2:]
    t = (torch.arange(out, dtype=feat.dtype) + 0.5) / out
    x0, y0, x1, y1 = (rois[:, i] / stride for i in range(4))
    xs = x0[:, None] + (x1 - x0)[:, None] * t
    ys = y0[:, None] + (y1 - y0)[:, None] * t
    gx = xs * (2.0 / w) - 1.0
    gy = ys * (2.0 / h) - 1.0
    grid = torch.stack(torch.broadcast_tensors(gx[:, None, :], gy[:, :, None]), dim=-1)
    return F.grid_sample(feat[batch_index], grid, mode="bilinear", padding_mode="zeros",
                         align_corners=False)


@dataclass
class ProposalSet:
    """RPN proposals for one image, sorted by descending objectness."""

    boxes: torch.Tensor
    objectness: torch.Tensor

    def __len__(self):
        return int(self.boxes.shape[0])

    def as_bboxes(self) -> list[BBox]:
        return [BBox.from_array(b) for b in self.boxes.tolist()]


@dataclass
class Detections:
    """Inference output for one image."""

    proposals: ProposalSet
    regions: list[RegionPrediction]
    refinements: torch.Tensor = field(repr=False)
    probs: torch.Tensor = field(repr=False)


class TwoStageDetector(nn.Module):
    def __init__(self, config: DetectorConfig | None = None):
        super().__init__()
        self.config = config or DetectorConfig()
        self.backbone = Backbone(self.config.backbone)
        c = self.backbone.out_channels
        self.rpn = RPNHead(c, self.config.num_anchors)
        self.roi_head = ROIHead(c, self.config.roi_size, self.config.hidden_width,
                                self.config.num_classes)
        self.register_buffer("anchors", make_anchors(self.config), persistent=False)

    @staticmethod
    def prepare(pixels) -> torch.Tensor:
        """uint8 ``(H, W)`` grids (or a list of them) to a normalized batch."""
        if isinstance(pixels, (list, tuple)):
            arr = np.stack([np.asarray(p) for p in pixels])
        else:
            arr = np.asarray(pixels)
            if arr.ndim == 2:
                arr = arr[None]
        x = torch.from_numpy(arr.astype(np.float32))[:, None]
        return (x - 110.0) / 50.0

    def check_input(self, x: torch.Tensor):
        if tuple(x.shape[-2:]) != self.config.input_size:
            raise ValueError(f"image size {tuple(x.shape[-2:])} does not match the configured "
                             f"input size {self.config.input_size}")

    def features(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        return self.backbone(x)

    @torch.no_grad()
    def propose(self, rpn_logits: torch.Tensor, rpn_deltas: torch.Tensor) -> list[ProposalSet]:
        cfg = self.config
        out = []
        for logits, deltas in zip(rpn_logits.detach(), rpn_deltas.detach()):
            boxes = clip_boxes(decode_boxes(self.anchors, deltas), cfg.input_size)
            scores = torch.sigmoid(logits)
            wh = boxes[:, 2:] - boxes[:, :2]
            ok = (wh >= cfg.min_proposal_size).all(dim=1)
            boxes, scores = boxes[ok], scores[ok]
            order = torch.argsort(scores, descending=True, stable=True)[:cfg.pre_nms]
            boxes, scores = boxes[order], scores[order]
            keep = tv_nms(boxes, scores, cfg.rpn_nms_iou)[:cfg.post_nms]
            out.append(ProposalSet(boxes[keep], scores[keep]))
        return out

    def roi_forward(self, feat: torch.Tensor, rois: list[torch.Tensor]):
        """ROI head over per-image box lists; returns ``(cls_logits, box_deltas)``."""
        idx = torch.cat([torch.full((len(r),), i, dtype=torch.long) for i, r in enumerate(rois)])
        boxes = torch.cat(rois).to(feat.dtype)
        pooled = roi_pool(feat, boxes, idx, self.config.roi_size, self.config.feature_stride)
        return self.roi_head(pooled)

    def forward(self, x: torch.Tensor):
        """Raw network outputs for a batch: RPN logits/deltas, proposals, ROI outputs."""
        feat = self.features(x)
        rpn_logits, rpn_deltas = self.rpn(feat)
        proposals = self.propose(rpn_logits, rpn_deltas)
        cls_logits, box_deltas = self.roi_forward(feat, [p.boxes for p in proposals])
        return feat, rpn_logits, rpn_deltas, proposals, cls_logits, box_deltas

    @torch.no_grad()
    def detect(self, pixels) -> list[Detections]:
        """Inference on one or more images: top proposals with class triples."""
        x = self.prepare(pixels)
        was_training = self.training
        self.eval()
        try:
            _, _, _, proposals, cls_logits, box_deltas = self(x)
        finally:
            self.train(was_training)
        probs_all = torch.softmax(cls_logits.double(), dim=1)
        out, start = [], 0
        for props in proposals:
            n = len(props)
            probs = probs_all[start:start + n]
            deltas = box_deltas[start:start + n]
            start += n
            regions, refined = _to_regions(props, probs, deltas, self.config.input_size)
            out.append(Detections(props, regions, refined, probs))
        return out


def _to_regions(props: ProposalSet, probs: torch.Tensor, deltas: torch.Tensor, size):
    """Class-specific refinement for the more likely mass class of each proposal."""
    if len(props) == 0:
        return [], deltas.new_zeros((0, 4))
    cls = 1 + torch.argmax(probs[:, 1:], dim=1)
    chosen = deltas[torch.arange(len(props)), cls]
    refined = clip_boxes(decode_boxes(props.boxes, chosen, ROI_BOX_WEIGHTS), size)
    regions = []
    for box, prop, p, obj in zip(refined.tolist(), props.boxes.tolist(), probs.tolist(),
                                 props.objectness.tolist()):
        if box[2] - box[0] < 1e-3 or box[3] - box[1] < 1e-3:
            box = prop
        s = sum(p)
        regions.append(RegionPrediction(BBox.from_array(box), tuple(v / s for v in p),
                                        min(max(obj, 0.0), 1.0)))
    return regions, refined


@dataclass
class ParamPartition:
    """Named parameter groups and the ROI box-regression subset."""

    conv: dict[str, nn.Parameter]
    rpn: dict[str, nn.Parameter]
    frcnn: dict[str, nn.Parameter]
    frcnn_reg: frozenset[str]

    @property
    def groups(self) -> dict[str, dict[str, nn.Parameter]]:
        return {"conv": self.conv, "rpn": self.rpn, "frcnn": self.frcnn}

    def all_names(self) -> list[str]:
        return [*self.conv, *self.rpn, *self.frcnn]

    def is_reg(self, name: str) -> bool:
        return name in self.frcnn_reg

    def reg_params(self) -> list[nn.Parameter]:
        return [self.frcnn[n] for n in sorted(self.frcnn_reg)]

    def non_reg_params(self) -> list[nn.Parameter]:
        return [p for g in self.groups.values() for n, p in g.items() if n not in self.frcnn_reg]


_GROUP_PREFIX = {"backbone.": "conv", "rpn.": "rpn", "roi_head.": "frcnn"}
_REG_PREFIX = "roi_head.bbox_pred."


def partition_params(model: TwoStageDetector) -> ParamPartition:
    groups: dict[str, dict] = {"conv": {}, "rpn": {}, "frcnn": {}}
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        for prefix, group in _GROUP_PREFIX.items():
            if name.startswith(prefix):
                groups[group][name] = p
                break
        else:
            raise RuntimeError(f"parameter {name!r} belongs to no group")
    reg = frozenset(n for n in groups["frcnn"] if n.startswith(_REG_PREFIX))
    if not reg:
        raise RuntimeError("no ROI box-regression parameters found")
    return ParamPartition(groups["conv"], groups["rpn"], groups["frcnn"], reg)


CHECKPOINT_VERSION = 1


def save_checkpoint(model: TwoStageDetector, path, seed: int | None = None, extra: dict | None = None):
    payload = {"version": CHECKPOINT_VERSION, "config": model.config.to_dict(), "seed": seed,
               "state_dict": model.state_dict(), "extra": extra or {}}
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[TwoStageDetector, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    model = TwoStageDetector(DetectorConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    return model, payload
