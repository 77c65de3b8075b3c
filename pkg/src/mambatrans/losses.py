"""Charbonnier reconstruction loss, four-part detection loss and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .detector import DetectionTargets, SurrogateDetector, encode_boxes, make_anchors, match_anchors
from .tensor import Tensor


@dataclass(frozen=True)
class CharbonnierConfig:
    alpha: float = 0.02
    beta: float = 0.98
    eps: float = 1e-3
    reduction: str = "sum"

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")


def _charbonnier_term(a: Tensor, b: Tensor, eps: float) -> Tensor:
    d = ops.sub(a, b)
    return ops.sum(ops.sqrt(ops.add(ops.mul(d, d), eps * eps)))


def charbonnier_loss(I_hat: Tensor, f, v, cfg: CharbonnierConfig = CharbonnierConfig()) -> Tensor:
    """``alpha * sum sqrt((I-f)^2 + eps^2) + beta * sum sqrt((I-v)^2 + eps^2)``.

    ``f`` is the fused input and ``v`` the visible image.
    """
    f = ops.as_tensor(f, like=I_hat)
    v = ops.as_tensor(v, like=I_hat)
    if I_hat.shape != f.shape or I_hat.shape != v.shape:
        raise ValueError(f"shape mismatch: {I_hat.shape}, {f.shape}, {v.shape}")
    loss = ops.add(
        ops.mul(_charbonnier_term(I_hat, f, cfg.eps), cfg.alpha),
        ops.mul(_charbonnier_term(I_hat, v, cfg.eps), cfg.beta),
    )
    if cfg.reduction == "mean":
        loss = ops.mul(loss, 1.0 / I_hat.size)
    return loss


def detection_loss(image: Tensor, targets: DetectionTargets, det: SurrogateDetector):
    """Return ``(total, parts)`` with parts ``cls``, ``bbox``, ``obj``, ``rpn``.

    All terms are sums over anchors. ``obj`` covers every non-ignored
    anchor; the other three only positive anchors, so they are exactly zero
    when nothing matches.
    """
    h, w = image.shape[:2]
    out = det(image)
    anchors = make_anchors(h, w, det.config)
    state, matched = match_anchors(anchors, targets, det.config)
    zero = Tensor(np.zeros((), dtype=image.dtype))

    valid = np.where(state >= 0)[0]
    obj = ops.sum(ops.bce_with_logits(ops.take(out["obj_logits"], valid), (state[valid] == 1)))

    pos = np.where(state == 1)[0]
    if pos.size:
        gt = targets.boxes[matched[pos]]
        reg = encode_boxes(gt, anchors[pos]).astype(image.dtype)
        rpn = ops.sum(ops.smooth_l1(ops.sub(ops.take(out["rpn_deltas"], pos), Tensor(reg))))
        bbox = ops.sum(ops.smooth_l1(ops.sub(ops.take(out["box_deltas"], pos), Tensor(reg))))
        cls = ops.cross_entropy(ops.take(out["cls_logits"], pos), targets.labels[matched[pos]])
    else:
        cls = bbox = rpn = zero
    total = ops.add(ops.add(ops.add(cls, bbox), obj), rpn)
    return total, {"cls": cls, "bbox": bbox, "obj": obj, "rpn": rpn}


@dataclass
class TACConfig:
    charbonnier: CharbonnierConfig = field(default_factory=CharbonnierConfig)
    lam: float = 5.0
    theta: float = 1.0
    detector: Optional[SurrogateDetector] = None

    def __post_init__(self):
        if self.lam < 0 or self.theta < 0:
            raise ValueError("lam and theta must be non-negative")


def tac_loss(I_hat: Tensor, f, v, targets: Optional[DetectionTargets], cfg: TACConfig):
    """``lam * charbonnier + theta * detection``; returns ``(total, parts)``.

    The detection branch is skipped (contributing exactly zero) when
    ``theta == 0``.
    """
    charb = charbonnier_loss(I_hat, f, v, cfg.charbonnier)
    parts = {"charbonnier": charb}
    total = ops.mul(charb, cfg.lam)
    if cfg.theta != 0:
        if cfg.detector is None or targets is None:
            raise ValueError("theta > 0 needs a detector and detection targets")
        det_total, det_parts = detection_loss(I_hat, targets, cfg.detector)
        parts.update(det_parts)
        parts["detection"] = det_total
        total = ops.add(total, ops.mul(det_total, cfg.theta))
    return total, parts
