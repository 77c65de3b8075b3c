"""Image-quality metrics (EN, AG, SF, PSNR) and box mAP."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .detector import box_iou

PSNR_CAP = 100.0
COCO_IOUS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


def to_gray8(img: np.ndarray) -> np.ndarray:
    """Luma (0.299, 0.587, 0.114) of a [0, 1] RGB image, rounded to 8-bit levels.

    2-D inputs are taken to be grayscale already on the 0..255 scale.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return np.clip(np.round(img), 0, 255)
    luma = img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114
    return np.clip(np.round(luma * 255.0), 0, 255)


def entropy_en(gray: np.ndarray) -> float:
    """Shannon entropy in bits of the 256-bin histogram."""
    g = np.asarray(gray).astype(np.int64).ravel()
    counts = np.bincount(g, minlength=256).astype(np.float64)
    p = counts[counts > 0] / g.size
    return float(-np.sum(p * np.log2(p)))


def spatial_frequency(gray: np.ndarray) -> float:
    """``sqrt(RF^2 + CF^2)``; RF/CF are RMS horizontal/vertical first differences."""
    g = np.asarray(gray, dtype=np.float64)
    if min(g.shape) < 2:
        raise ValueError("spatial frequency needs at least a 2x2 image")
    rf = np.sqrt(np.mean(np.diff(g, axis=1) ** 2))
    cf = np.sqrt(np.mean(np.diff(g, axis=0) ** 2))
    return float(np.sqrt(rf * rf + cf * cf))


def avg_gradient(gray: np.ndarray) -> float:
    """Mean of ``sqrt((dx^2 + dy^2) / 2)`` with forward differences."""
    g = np.asarray(gray, dtype=np.float64)
    if min(g.shape) < 2:
        raise ValueError("average gradient needs at least a 2x2 image")
    dx = g[:-1, 1:] - g[:-1, :-1]
    dy = g[1:, :-1] - g[:-1, :-1]
    return float(np.mean(np.sqrt((dx * dx + dy * dy) / 2.0)))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB of two [0, 1] images compared on the 0..255 scale; identical inputs give 100."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a * 255.0 - b * 255.0) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(255.0 ** 2 / mse)))


def _average_precision(recall: np.ndarray, precision: np.ndarray, interpolation: str) -> float:
    if recall.size == 0:
        return 0.0
    # precision envelope: best precision at any recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    if interpolation == "coco101":
        grid = np.linspace(0.0, 1.0, 101)
        idx = np.searchsorted(recall, grid, side="left")
        q = np.where(idx < env.size, env[np.minimum(idx, env.size - 1)], 0.0)
        return float(q.mean())
    # area under the stepwise envelope
    r = np.concatenate([[0.0], recall])
    return float(np.sum((r[1:] - r[:-1]) * env))


def _class_ap(preds, targets, cls: int, thr: float, interpolation: str) -> float | None:
    n_gt = sum(int(np.sum(t["labels"] == cls)) for t in targets)
    if n_gt == 0:
        return None
    flat = []
    for img, plist in enumerate(preds):
        for order, (box, score, label) in enumerate(plist):
            if label == cls:
                flat.append((score, img, order, box))
    # stable sort keeps input order on ties
    flat.sort(key=lambda e: -e[0])
    used = [np.zeros(int(np.sum(t["labels"] == cls)), dtype=bool) for t in targets]
    gt_boxes = [t["boxes"][t["labels"] == cls] for t in targets]
    tp = np.zeros(len(flat))
    for k, (_, img, _, box) in enumerate(flat):
        b = np.asarray(box, dtype=np.float64)
        if (b[2] - b[0]) <= 0 or (b[3] - b[1]) <= 0 or gt_boxes[img].size == 0:
            continue
        ious = box_iou(b, gt_boxes[img])[0]
        ious[used[img]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= thr:
            used[img][j] = True
            tp[k] = 1
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(flat) + 1)
    return _average_precision(recall, precision, interpolation)


def mean_average_precision(
    preds: Sequence[Sequence[tuple]],
    targets: Sequence,
    iou_thresholds: Sequence[float] = COCO_IOUS,
    interpolation: str = "area",
) -> dict:
    """Box mAP over images.

    Args:
        preds: per image, a list of ``(box, score, label)``.
        targets: per image, a ``DetectionTargets`` or a dict with ``boxes``
            and ``labels``.
        iou_thresholds: thresholds averaged for ``mAP50_95``; 0.5 is always
            evaluated for ``mAP50``.
        interpolation: ``"area"`` (area under the precision envelope) or
            ``"coco101"`` (101-point sampling).

    Returns:
        ``{"mAP50", "mAP50_95", "per_class_AP50"}``. Classes without targets are
        skipped; with no targets at all every value is 0.
    """
    if interpolation not in ("area", "coco101"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    if len(preds) != len(targets):
        raise ValueError("preds and targets must cover the same images")
    norm = []
    for t in targets:
        boxes = np.asarray(t["boxes"] if isinstance(t, dict) else t.boxes, dtype=np.float64).reshape(-1, 4)
        labels = np.asarray(t["labels"] if isinstance(t, dict) else t.labels, dtype=np.int64).reshape(-1)
        norm.append({"boxes": boxes, "labels": labels})
    classes = sorted({int(c) for t in norm for c in t["labels"]})
    per_class50 = {}
    per_thr = []
    thresholds = sorted(set(float(x) for x in iou_thresholds))
    for thr in thresholds:
        aps = []
        for c in classes:
            ap = _class_ap(preds, norm, c, thr, interpolation)
            if ap is not None:
                aps.append(ap)
                if abs(thr - 0.5) < 1e-12:
                    per_class50[c] = ap
        per_thr.append(float(np.mean(aps)) if aps else 0.0)
    if 0.5 not in thresholds:
        for c in classes:
            per_class50[c] = _class_ap(preds, norm, c, 0.5, interpolation)
    map50 = float(np.mean(list(per_class50.values()))) if per_class50 else 0.0
    return {"mAP50": map50, "mAP50_95": float(np.mean(per_thr)) if per_thr else 0.0, "per_class_AP50": per_class50}


@dataclass
class MetricReport:
    per_image: list[dict] = field(default_factory=list)
    detection: dict = field(default_factory=dict)

    def add_image(self, name: str, img: np.ndarray, reference: np.ndarray | None = None) -> dict:
        g = to_gray8(img)
        row = {"name": name, "en": entropy_en(g), "ag": avg_gradient(g), "sf": spatial_frequency(g)}
        if reference is not None:
            row["psnr"] = psnr(img, reference)
        self.per_image.append(row)
        return row

    @property
    def aggregate(self) -> dict:
        keys = [k for k in ("en", "ag", "sf", "psnr") if self.per_image and all(k in r for r in self.per_image)]
        return {k: float(np.mean([r[k] for r in self.per_image])) for k in keys}

    def to_dict(self) -> dict:
        det = dict(self.detection)
        if "per_class_AP50" in det:
            det["per_class_AP50"] = {str(k): v for k, v in det["per_class_AP50"].items()}
        return {"per_image": self.per_image, "aggregate": self.aggregate, "detection": det}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_table(self) -> str:
        cols = ["name", "en", "ag", "sf", "psnr"]
        rows = [[str(r.get(c, "")) if c == "name" else (f"{r[c]:.4f}" if c in r else "-") for c in cols]
                for r in self.per_image]
        agg = self.aggregate
        rows.append(["mean"] + [f"{agg[c]:.4f}" if c in agg else "-" for c in cols[1:]])
        widths = [max(len(c), *(len(r[i]) for r in rows)) for i, c in enumerate(cols)]
        lines = ["  ".join(c.ljust(widths[i]) for i, c in enumerate(cols))]
        lines += ["  ".join(r[i].ljust(widths[i]) for i in range(len(cols))) for r in rows]
        for key in ("mAP50", "mAP50_95"):
            if key in self.detection:
                lines.append(f"{key}: {self.detection[key]:.4f}")
        return "\n".join(lines)
