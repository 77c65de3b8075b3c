"""Adam, milestone learning-rate halving, translator training and detector pre-training."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import ops
from .data import Sample, augment
from .detector import DetectorConfig, SurrogateDetector, save_detector
from .losses import TACConfig, detection_loss, tac_loss
from .model import TranslatorModel, save_model, translate
from .nn import Module
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

CURVE_FIELDS = ("step", "total", "charbonnier", "cls", "bbox", "obj", "rpn", "lr")


class NumericAbort(FloatingPointError):
    """Training hit a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 2
    milestones: Optional[list[int]] = None
    max_steps: int = 500
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    crop: Optional[int] = None
    checkpoint_every: int = 0
    checkpoint_dir: Optional[str] = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.milestones is not None:
            ms = list(self.milestones)
            if any(b <= a for a, b in zip(ms, ms[1:])):
                raise ValueError(f"milestones must be strictly increasing, got {ms}")

    def resolved_milestones(self) -> list[int]:
        if self.milestones is not None:
            return list(self.milestones)
        return [self.max_steps // 2, (3 * self.max_steps) // 4]


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Base lr halved once for every milestone ``<= step``."""
    passed = sum(1 for m in cfg.resolved_milestones() if m <= step)
    return cfg.lr * 0.5 ** passed


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericAbort(f"non-finite gradient in parameter {name!r}")
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


def _unique_params(module: Module) -> dict[str, Tensor]:
    out, seen = {}, set()
    for name, p in module.named_parameters():
        if id(p) not in seen:
            seen.add(id(p))
            out[name] = p
    return out


def _step_grads(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {n: p.grad for n, p in params.items() if p.grad is not None}


@dataclass
class TrainResult:
    model: Module
    curve: list[dict]
    optimizer: OptimizerState


def write_curve(path, curve: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fp:
        writer = csv.DictWriter(fp, fieldnames=CURVE_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for row in curve:
            writer.writerow({k: row.get(k, 0.0) for k in CURVE_FIELDS})


def _batch_plan(rng: np.random.Generator, n: int, batch: int) -> np.ndarray:
    return rng.choice(n, size=min(batch, n), replace=False)


def train(
    model: TranslatorModel,
    dataset: Sequence[Sample],
    detector: Optional[SurrogateDetector],
    cfg: TrainConfig,
    tac: Optional[TACConfig] = None,
    on_step: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Optimize the translator with the task-aware loss.

    Each step draws a seeded batch, augments every sample, translates,
    evaluates the loss and takes one Adam step on the batch-mean gradient.
    The detector is used frozen and never updated.
    """
    tac = tac or TACConfig(detector=detector)
    if tac.detector is None and detector is not None:
        tac.detector = detector
    if tac.detector is not None and any(p.requires_grad for p in tac.detector.parameters()):
        raise ValueError("detector must be frozen before translator training")
    params = _unique_params(model)
    state = OptimizerState(betas=cfg.betas, eps=cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    curve: list[dict] = []
    n = len(dataset)
    for step in range(cfg.max_steps):
        lr = lr_at(step, cfg)
        model.zero_grad()
        batch = _batch_plan(rng, n, cfg.batch_size)
        aug_seeds = rng.integers(0, 2**31 - 1, size=len(batch))
        row = {k: 0.0 for k in CURVE_FIELDS}
        for idx, aseed in zip(batch, aug_seeds):
            s = dataset[int(idx)]
            crop = cfg.crop or min(s.size)
            s = augment(s, int(aseed), crop)
            out = translate(s.fused, s.voted_mask, s.text_ids, model, training=True)
            total, parts = tac_loss(out, s.fused, s.visible, s.det_targets, tac)
            value = total.item()
            if not np.isfinite(value):
                raise NumericAbort(f"non-finite loss at step {step}: " + ", ".join(
                    f"{k}={v.item():.4g}" for k, v in parts.items()))
            backward(ops.mul(total, 1.0 / len(batch)))
            row["total"] += value / len(batch)
            for k in ("charbonnier", "cls", "bbox", "obj", "rpn"):
                if k in parts:
                    row[k] += parts[k].item() / len(batch)
        adam_step(params, _step_grads(params), state, lr)
        row["step"], row["lr"] = step, lr
        curve.append(row)
        if on_step is not None:
            on_step(row)
        if step % 50 == 0:
            log.info("step %d total %.4f lr %.2e", step, row["total"], lr)
        if cfg.checkpoint_every and cfg.checkpoint_dir and (step + 1) % cfg.checkpoint_every == 0:
            Path(cfg.checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_model(Path(cfg.checkpoint_dir) / f"step_{step + 1:06d}.ckpt", model)
    return TrainResult(model, curve, state)


def pretrain_detector(
    dataset: Sequence[Sample],
    steps: int,
    seed: int,
    config: DetectorConfig = DetectorConfig(),
    lr: float = 3e-3,
    batch_size: int = 2,
    out_path=None,
) -> tuple[SurrogateDetector, list[float]]:
    """Fit the surrogate on visible images, then freeze (and optionally save) it."""
    det = SurrogateDetector(config, seed)
    params = _unique_params(det)
    state = OptimizerState()
    rng = np.random.default_rng(seed)
    curve = []
    for step in range(steps):
        det.zero_grad()
        batch = _batch_plan(rng, len(dataset), batch_size)
        flips = rng.random(len(batch)) < 0.5
        value = 0.0
        for idx, flip in zip(batch, flips):
            s = augment(dataset[int(idx)], 0, min(dataset[int(idx)].size), force_flip=bool(flip))
            total, parts = detection_loss(Tensor(s.visible), s.det_targets, det)
            if not np.isfinite(total.item()):
                raise NumericAbort(f"non-finite detector loss at step {step}")
            backward(ops.mul(total, 1.0 / len(batch)))
            value += total.item() / len(batch)
        adam_step(params, _step_grads(params), state, lr)
        curve.append(value)
    det.freeze()
    det.zero_grad()
    if out_path is not None:
        save_detector(out_path, det)
    return det, curve


def dataset_tac(model: TranslatorModel, dataset: Sequence[Sample], tac: TACConfig) -> float:
    """Summed task-aware loss over ``dataset`` without augmentation (unclamped outputs)."""
    total = 0.0
    with no_grad():
        for s in dataset:
            out = translate(s.fused, s.voted_mask, s.text_ids, model, training=True)
            total += tac_loss(out, s.fused, s.visible, s.det_targets, tac)[0].item()
    return total


def dataset_detection_loss(images: Sequence[np.ndarray], dataset: Sequence[Sample], det: SurrogateDetector) -> float:
    total = 0.0
    with no_grad():
        for img, s in zip(images, dataset):
            total += detection_loss(Tensor(np.asarray(img, dtype=np.float32)), s.det_targets, det)[0].item()
    return total


def translate_dataset(model: TranslatorModel, dataset: Sequence[Sample]) -> list[np.ndarray]:
    with no_grad():
        return [translate(s.fused, s.voted_mask, s.text_ids, model).data for s in dataset]
