"""Tiny frozen two-head anchor detector used as the task prior.

A three-layer stride-2 backbone feeds two heads on a stride-8 grid with one
square anchor per cell:

* proposal head: objectness logit + box offsets (``obj`` and ``rpn`` terms)
* classification head: class logits + refined box offsets (``cls`` and ``bbox``)
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import nn, ops
from .serialize import DETECTOR_TAG, load_checkpoint, save_checkpoint
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class DetectorConfig:
    num_classes: int = 3
    width: int = 16
    stride: int = 8
    anchor_size: float = 16.0
    pos_iou: float = 0.5
    neg_iou: float = 0.4

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class DetectionTargets:
    """Ground-truth boxes ``(x1, y1, x2, y2)`` in pixels with class labels."""

    boxes: np.ndarray
    labels: np.ndarray
    image_size: tuple[int, int]

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.labels):
            raise ValueError("boxes and labels differ in length")
        h, w = self.image_size
        b = self.boxes
        if len(b) and (np.any(b[:, 0] < 0) or np.any(b[:, 0] >= b[:, 2]) or np.any(b[:, 2] > w)
                       or np.any(b[:, 1] < 0) or np.any(b[:, 1] >= b[:, 3]) or np.any(b[:, 3] > h)):
            raise ValueError(f"boxes outside image {w}x{h} or degenerate: {b.tolist()}")

    @classmethod
    def empty(cls, image_size) -> "DetectionTargets":
        return cls(np.zeros((0, 4)), np.zeros(0, dtype=np.int64), tuple(image_size))

    def __len__(self) -> int:
        return len(self.labels)


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def make_anchors(h: int, w: int, cfg: DetectorConfig) -> np.ndarray:
    hf, wf = feature_size(h, w)
    ys, xs = np.meshgrid(np.arange(hf), np.arange(wf), indexing="ij")
    cx = (xs.reshape(-1) + 0.5) * cfg.stride
    cy = (ys.reshape(-1) + 0.5) * cfg.stride
    half = cfg.anchor_size / 2.0
    return np.stack([cx - half, cy - half, cx + half, cy + half], axis=1)


def feature_size(h: int, w: int) -> tuple[int, int]:
    for _ in range(3):
        h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
    return h, w


def encode_boxes(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    aw, ah = anchors[:, 2] - anchors[:, 0], anchors[:, 3] - anchors[:, 1]
    ax, ay = anchors[:, 0] + 0.5 * aw, anchors[:, 1] + 0.5 * ah
    gw, gh = gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]
    gx, gy = gt[:, 0] + 0.5 * gw, gt[:, 1] + 0.5 * gh
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode_boxes(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    aw, ah = anchors[:, 2] - anchors[:, 0], anchors[:, 3] - anchors[:, 1]
    ax, ay = anchors[:, 0] + 0.5 * aw, anchors[:, 1] + 0.5 * ah
    d = np.asarray(deltas, dtype=np.float64)
    cx, cy = ax + d[:, 0] * aw, ay + d[:, 1] * ah
    bw, bh = aw * np.exp(np.clip(d[:, 2], -4, 4)), ah * np.exp(np.clip(d[:, 3], -4, 4))
    return np.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], axis=1)


def match_anchors(anchors: np.ndarray, targets: DetectionTargets, cfg: DetectorConfig):
    """Assign anchors to targets.

    Returns ``(state, matched)``: state is 1 (positive), 0 (negative) or -1
    (ignored); ``matched`` is the target index for positives. Besides the
    IoU thresholds, each target's best-overlapping anchor is made positive so
    that no target goes unmatched on the coarse grid.
    """
    n = len(anchors)
    state = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    if len(targets) == 0:
        return state, matched
    iou = box_iou(anchors, targets.boxes)
    best_t = iou.argmax(axis=1)
    best = iou[np.arange(n), best_t]
    state[(best >= cfg.neg_iou) & (best < cfg.pos_iou)] = -1
    pos = best >= cfg.pos_iou
    state[pos] = 1
    matched[pos] = best_t[pos]
    for t in range(len(targets)):
        a = int(iou[:, t].argmax())
        if iou[a, t] > 0:
            state[a] = 1
            matched[a] = t
    return state, matched


class SurrogateDetector(nn.Module):
    def __init__(self, config: DetectorConfig = DetectorConfig(), seed: int = 0):
        self._config = config
        rng = np.random.default_rng(seed)
        w = config.width
        self.conv1 = nn.Conv2d(rng, 3, w // 2, k=3, stride=2)
        self.conv2 = nn.Conv2d(rng, w // 2, w, k=3, stride=2)
        self.conv3 = nn.Conv2d(rng, w, w, k=3, stride=2)
        self.rpn_head = nn.Conv2d(rng, w, 5, k=3)
        self.cls_head = nn.Conv2d(rng, w, config.num_classes + 4, k=3)

    @property
    def config(self) -> DetectorConfig:
        return self._config

    def freeze(self) -> "SurrogateDetector":
        return self.requires_grad_(False)

    def forward(self, image: Tensor) -> dict[str, Tensor]:
        x = ops.silu(self.conv1(image))
        x = ops.silu(self.conv2(x))
        x = ops.silu(self.conv3(x))
        hf, wf, _ = x.shape
        a = hf * wf
        rpn = ops.reshape(self.rpn_head(x), (a, 5))
        cls = ops.reshape(self.cls_head(x), (a, self.config.num_classes + 4))
        k = self.config.num_classes
        return {
            "obj_logits": ops.getitem(rpn, (slice(None), 0)),
            "rpn_deltas": ops.getitem(rpn, (slice(None), slice(1, 5))),
            "cls_logits": ops.getitem(cls, (slice(None), slice(0, k))),
            "box_deltas": ops.getitem(cls, (slice(None), slice(k, k + 4))),
        }

    __call__ = forward

    def predict(self, image, score_thresh: float = 0.05, nms_iou: float = 0.5, max_det: int = 50):
        """Scored boxes ``[(box, score, label), ...]`` after per-class NMS."""
        image = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=self.conv1.weight.dtype))
        with no_grad():
            out = self.forward(image)
        h, w = image.shape[:2]
        anchors = make_anchors(h, w, self.config)
        obj = ops._sigmoid_np(out["obj_logits"].data.astype(np.float64))
        logits = out["cls_logits"].data.astype(np.float64)
        probs = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        labels = probs.argmax(axis=1)
        scores = obj * probs[np.arange(len(labels)), labels]
        boxes = decode_boxes(out["box_deltas"].data, anchors)
        boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, w)
        boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, h)
        keep_idx = []
        for c in np.unique(labels):
            idx = np.where((labels == c) & (scores >= score_thresh))[0]
            idx = idx[np.argsort(-scores[idx], kind="stable")]
            while idx.size:
                i = idx[0]
                keep_idx.append(i)
                if idx.size == 1:
                    break
                ious = box_iou(boxes[i:i + 1], boxes[idx[1:]])[0]
                idx = idx[1:][ious < nms_iou]
        keep_idx = sorted(keep_idx, key=lambda i: -scores[i])[:max_det]
        return [(boxes[i].tolist(), float(scores[i]), int(labels[i])) for i in keep_idx]


def save_detector(path, det: SurrogateDetector) -> None:
    header = {"format": "MTDET1", "config": det.config.to_dict()}
    save_checkpoint(path, DETECTOR_TAG, header, det.state_dict())


def load_detector(path) -> SurrogateDetector:
    header, tensors = load_checkpoint(Path(path), DETECTOR_TAG)
    det = SurrogateDetector(DetectorConfig.from_dict(header["config"]))
    det.load_state_dict(tensors)
    return det.freeze()
