"""Synthetic infrared/visible/fused scenes, mask voting, augmentation and dataset I/O.

Scenes are rendered from a single integer seed. The visible image has a
textured background with coloured targets; the infrared image is a nearly
flat background with bright targets; the fused image is their average pushed
through a fixed global contrast change, which makes it deliberately unlike
the visible image.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .detector import DetectionTargets

MIN_SCENE_SIDE = 32
MAX_TARGETS = 8
PLACEMENT_ATTEMPTS = 100
SALT_FRACTION = 0.01
IR_BACKGROUND = 0.2
IR_TARGET = 0.9
FUSED_GAIN = 1.3
FUSED_OFFSET = -0.06
MIN_BOX_AREA = 4.0

CLASS_NAMES = ("person", "car", "sign")
_COUNT_WORDS = ("no", "one", "two", "three", "four", "five", "six", "seven", "eight")
_POSITIONS = ("left", "right", "top", "bottom", "center")
VOCAB: tuple[str, ...] = (
    ("<pad>", "<bos>", "<eos>", "<unk>")
    + _COUNT_WORDS
    + CLASS_NAMES
    + _POSITIONS
    + ("scene", "with", "targets", "at", "and", "a", "the", "in", "near", "far",
       "bright", "dark", "warm", "cold", "road", "field", "night", "day", "large", "small",
       "thermal", "visible", "texture", "smooth", "background", "object", "region", "upper",
       "lower", "corner", "edge", "middle", "busy", "empty", "clear", "hot", "dim", "shape",
       "round", "tall", "wide", "long", "sky")
)
assert len(VOCAB) == 64
TOKEN_ID = {tok: i for i, tok in enumerate(VOCAB)}


class DataError(RuntimeError):
    """A dataset file is missing, unreadable or inconsistent."""


@dataclass
class Sample:
    visible: np.ndarray            # (H, W, 3) float32 in [0, 1], multiples of 1/255
    infrared: np.ndarray
    fused: np.ndarray
    candidate_masks: np.ndarray    # (3, H, W) uint8 in {0, 1}
    voted_mask: np.ndarray         # (H, W) uint8 in {0, 1}
    text_ids: list[int]
    det_targets: DetectionTargets
    seg_labels: np.ndarray         # (H, W) uint8, 0 = background, class + 1 otherwise
    seed: int = 0
    requested_targets: int = 0

    @property
    def size(self) -> tuple[int, int]:
        return self.visible.shape[:2]

    @property
    def placed_targets(self) -> int:
        return len(self.det_targets)


def _quantize(x: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8).astype(np.float32) / np.float32(255.0))


def _shape_mask(cls: int, x0: int, y0: int, w: int, h: int, H: int, W: int) -> np.ndarray:
    m = np.zeros((H, W), dtype=bool)
    if cls == 2:
        yy, xx = np.mgrid[0:h, 0:w]
        r = min(w, h) / 2.0
        disc = (xx + 0.5 - w / 2.0) ** 2 + (yy + 0.5 - h / 2.0) ** 2 <= r * r
        m[y0:y0 + h, x0:x0 + w] = disc
    else:
        m[y0:y0 + h, x0:x0 + w] = True
    return m


def _target_size(cls: int, rng: np.random.Generator) -> tuple[int, int]:
    if cls == 0:
        return int(rng.integers(6, 11)), int(rng.integers(14, 23))
    if cls == 1:
        return int(rng.integers(14, 23)), int(rng.integers(8, 13))
    d = int(rng.integers(10, 17))
    return d, d


def _mask_bbox(m: np.ndarray) -> tuple[float, float, float, float]:
    ys, xs = np.nonzero(m)
    return float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)


def _position_word(cx: float, cy: float, W: int, H: int) -> str:
    dx, dy = cx / W - 0.5, cy / H - 0.5
    if max(abs(dx), abs(dy)) < 0.17:
        return "center"
    if abs(dx) >= abs(dy):
        return "left" if dx < 0 else "right"
    return "top" if dy < 0 else "bottom"


def describe(labels: Sequence[int], boxes: np.ndarray, W: int, H: int) -> list[int]:
    """Token ids of a fixed-grammar caption naming target counts, classes and positions."""
    words = ["<bos>", "scene", "with", _COUNT_WORDS[len(labels)], "targets"]
    for c, name in enumerate(CLASS_NAMES):
        k = int(np.sum(np.asarray(labels) == c))
        if k:
            words += [_COUNT_WORDS[k], name]
    for lab, b in zip(labels, boxes):
        words += [CLASS_NAMES[lab], "at", _position_word((b[0] + b[2]) / 2, (b[1] + b[3]) / 2, W, H)]
    words.append("<eos>")
    return [TOKEN_ID[w] for w in words]


def mask_vote(m1: np.ndarray, m2: np.ndarray, m3: np.ndarray) -> np.ndarray:
    """Per-pixel majority of three binary masks."""
    m1, m2, m3 = (np.asarray(m) for m in (m1, m2, m3))
    if not (m1.shape == m2.shape == m3.shape):
        raise ValueError(f"mask shapes differ: {m1.shape}, {m2.shape}, {m3.shape}")
    votes = (m1 != 0).astype(np.uint8) + (m2 != 0) + (m3 != 0)
    return (votes >= 2).astype(np.uint8)


def _render_visible(rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    base = rng.uniform(0.3, 0.6, size=3)
    grad = 0.1 * (yy / H - 0.5)[..., None]
    fx, fy = rng.uniform(0.15, 0.6, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=3)
    texture = 0.08 * np.sin(fx * xx[..., None] + fy * yy[..., None] + phase)
    noise = rng.normal(0.0, 0.03, size=(H, W, 3))
    return base + grad + texture + noise


def generate_scene(seed: int, H: int = 64, W: int = 64, num_targets: int = 3) -> Sample:
    """Render one deterministic scene.

    Targets that cannot be placed without overlap after 100 attempts are
    dropped; ``requested_targets`` keeps the original count.
    """
    if H < MIN_SCENE_SIDE or W < MIN_SCENE_SIDE:
        raise ValueError(f"scene must be at least {MIN_SCENE_SIDE}x{MIN_SCENE_SIDE}, got {H}x{W}")
    if not 0 <= num_targets <= MAX_TARGETS:
        raise ValueError(f"num_targets must be in [0, {MAX_TARGETS}]")
    rng = np.random.default_rng(seed)
    visible = _render_visible(rng, H, W)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    infrared = IR_BACKGROUND + 0.01 * np.sin(2 * np.pi * (xx / W + rng.uniform()))
    seg = np.zeros((H, W), dtype=np.uint8)
    occupied = np.zeros((H, W), dtype=bool)
    boxes, labels = [], []
    for _ in range(num_targets):
        cls = int(rng.integers(0, len(CLASS_NAMES)))
        w, h = _target_size(cls, rng)
        color = np.clip(np.eye(3)[cls % 3] * 0.55 + 0.3 + rng.uniform(-0.05, 0.05, size=3), 0, 1)
        if cls == 2:
            color = np.array([0.85, 0.8, 0.2]) + rng.uniform(-0.05, 0.05, size=3)
        for _attempt in range(PLACEMENT_ATTEMPTS):
            x0 = int(rng.integers(0, W - w + 1))
            y0 = int(rng.integers(0, H - h + 1))
            pad = occupied[max(y0 - 2, 0):y0 + h + 2, max(x0 - 2, 0):x0 + w + 2]
            if not pad.any():
                break
        else:
            continue
        m = _shape_mask(cls, x0, y0, w, h, H, W)
        occupied |= m
        seg[m] = cls + 1
        shade = 1.0 - 0.1 * (yy[m] - y0) / max(h, 1)
        visible[m] = color[None, :] * shade[:, None]
        infrared[m] = IR_TARGET
        boxes.append(_mask_bbox(m))
        labels.append(cls)

    visible = _quantize(visible)
    infrared = _quantize(np.repeat(infrared[..., None], 3, axis=2))
    blend = 0.5 * visible.astype(np.float64) + 0.5 * infrared
    fused = _quantize(0.5 + FUSED_GAIN * (blend - 0.5) + FUSED_OFFSET)

    truth = (seg > 0).astype(np.uint8)
    dilated = ndimage.binary_dilation(truth, structure=np.ones((3, 3))).astype(np.uint8)
    eroded = ndimage.binary_erosion(truth, structure=np.ones((3, 3))).astype(np.uint8)
    # one draw, disjoint salt sites: noise alone never outvotes an empty truth
    salt = rng.random((H, W))
    dilated[salt < SALT_FRACTION] = 1
    eroded[(salt >= SALT_FRACTION) & (salt < 2 * SALT_FRACTION)] = 1
    candidates = np.stack([truth, dilated, eroded])

    box_arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return Sample(
        visible=visible,
        infrared=infrared,
        fused=fused,
        candidate_masks=candidates,
        voted_mask=mask_vote(*candidates),
        text_ids=describe(labels, box_arr, W, H),
        det_targets=DetectionTargets(box_arr, np.asarray(labels, dtype=np.int64), (H, W)),
        seg_labels=seg,
        seed=seed,
        requested_targets=num_targets,
    )


def scene_seed(dataset_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([dataset_seed, index]).generate_state(1)[0])


def generate_dataset(seed: int, count: int, size: int = 64) -> list[Sample]:
    samples = []
    for i in range(count):
        s = scene_seed(seed, i)
        n = int(np.random.default_rng(s).integers(1, 5))
        samples.append(generate_scene(s, size, size, n))
    return samples


# -- augmentation --------------------------------------------------------

def _flip_boxes(boxes: np.ndarray, W: int) -> np.ndarray:
    out = boxes.copy()
    out[:, 0] = W - boxes[:, 2]
    out[:, 2] = W - boxes[:, 0]
    return out


def augment(sample: Sample, seed: int, crop: int, force_flip: bool | None = None) -> Sample:
    """Random horizontal flip and square crop applied identically to every field.

    Boxes are clipped to the crop window and dropped when their area falls
    below 4 px^2. ``force_flip`` overrides the coin toss.
    """
    H, W = sample.size
    if crop > min(H, W) or crop < 1:
        raise ValueError(f"crop {crop} does not fit a {H}x{W} sample")
    rng = np.random.default_rng(seed)
    flip = bool(rng.random() < 0.5) if force_flip is None else force_flip
    y0 = int(rng.integers(0, H - crop + 1))
    x0 = int(rng.integers(0, W - crop + 1))

    def spatial(a: np.ndarray, channel_first: bool = False) -> np.ndarray:
        if channel_first:
            a = a[:, :, ::-1] if flip else a
            return np.ascontiguousarray(a[:, y0:y0 + crop, x0:x0 + crop])
        a = a[:, ::-1] if flip else a
        return np.ascontiguousarray(a[y0:y0 + crop, x0:x0 + crop])

    boxes = sample.det_targets.boxes.copy()
    labels = sample.det_targets.labels.copy()
    if flip:
        boxes = _flip_boxes(boxes, W)
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]] - x0, 0, crop)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]] - y0, 0, crop)
    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    keep = area >= MIN_BOX_AREA
    return replace(
        sample,
        visible=spatial(sample.visible),
        infrared=spatial(sample.infrared),
        fused=spatial(sample.fused),
        candidate_masks=spatial(sample.candidate_masks, channel_first=True),
        voted_mask=spatial(sample.voted_mask),
        seg_labels=spatial(sample.seg_labels),
        det_targets=DetectionTargets(boxes[keep], labels[keep], (crop, crop)),
        text_ids=list(sample.text_ids),
    )


# -- persistence ----------------------------------------------------------

SPLITS = ("train", "val", "test")
_IMAGE_DIRS = ("images", "ir", "fused", "masks", "seg")


@dataclass
class DatasetManifest:
    root: Path
    records: list[dict]
    generator_seed: int = 0

    def __post_init__(self):
        self.root = Path(self.root)
        ids = [r["id"] for r in self.records]
        if len(set(ids)) != len(ids):
            raise DataError("manifest lists a sample id twice, so splits overlap")
        for r in self.records:
            if r["split"] not in SPLITS:
                raise DataError(f"unknown split {r['split']!r} for sample {r['id']}")

    def split(self, name: str) -> list[int]:
        return [i for i, r in enumerate(self.records) if r["split"] == name]

    def __len__(self) -> int:
        return len(self.records)


def _write_png(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(arr).save(path, format="PNG", optimize=False, compress_level=6)


def _read_png(path: Path) -> np.ndarray:
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    try:
        with Image.open(path) as im:
            return np.array(im)
    except Exception as exc:  # PIL raises a zoo of exception types
        raise DataError(f"cannot read {path}: {exc}") from exc


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(img * 255.0).astype(np.uint8)


def _from_u8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32) / np.float32(255.0)


def save_dataset(samples: Iterable[Sample], root, splits: Sequence[str] | None = None, generator_seed: int = 0) -> DatasetManifest:
    """Write samples as PNGs plus ``manifest.json`` (sorted keys) under ``root``."""
    root = Path(root)
    for d in _IMAGE_DIRS:
        (root / d).mkdir(parents=True, exist_ok=True)
    samples = list(samples)
    splits = list(splits) if splits is not None else ["train"] * len(samples)
    records = []
    for i, (s, split) in enumerate(zip(samples, splits)):
        sid = f"{i:04d}"
        files = {
            "visible": f"images/{sid}.png",
            "infrared": f"ir/{sid}.png",
            "fused": f"fused/{sid}.png",
            "voted_mask": f"masks/{sid}.png",
            "seg": f"seg/{sid}.png",
            "candidates": [f"masks/{sid}_c{k}.png" for k in range(3)],
        }
        _write_png(root / files["visible"], _to_u8(s.visible))
        _write_png(root / files["infrared"], _to_u8(s.infrared))
        _write_png(root / files["fused"], _to_u8(s.fused))
        _write_png(root / files["voted_mask"], s.voted_mask * np.uint8(255))
        _write_png(root / files["seg"], s.seg_labels)
        for k, name in enumerate(files["candidates"]):
            _write_png(root / name, s.candidate_masks[k] * np.uint8(255))
        records.append({
            "id": sid,
            "split": split,
            "files": files,
            "text_ids": [int(t) for t in s.text_ids],
            "boxes": s.det_targets.boxes.tolist(),
            "labels": s.det_targets.labels.tolist(),
            "image_size": list(s.size),
            "seed": int(s.seed),
            "requested_targets": int(s.requested_targets),
        })
    manifest = DatasetManifest(root, records, generator_seed)
    doc = {"format": "mambatrans-dataset-1", "generator_seed": generator_seed, "samples": records}
    (root / "manifest.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return manifest


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.json"
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt manifest {path}: {exc}") from exc
    manifest = DatasetManifest(root, doc["samples"], doc.get("generator_seed", 0))
    for r in manifest.records:
        f = r["files"]
        for name in [f["visible"], f["infrared"], f["fused"], f["voted_mask"], f["seg"], *f["candidates"]]:
            if not (root / name).is_file():
                raise DataError(f"missing file: {root / name}")
    return manifest


class Dataset:
    """Lazy sample access over a saved dataset."""

    def __init__(self, manifest: DatasetManifest, split: str | None = None):
        self.manifest = manifest
        self.indices = list(range(len(manifest))) if split is None else manifest.split(split)

    def __len__(self) -> int:
        return len(self.indices)

    def __getitem__(self, i: int) -> Sample:
        r = self.manifest.records[self.indices[i]]
        root, f = self.manifest.root, r["files"]
        cands = np.stack([(_read_png(root / c) > 0).astype(np.uint8) for c in f["candidates"]])
        h, w = r["image_size"]
        return Sample(
            visible=_from_u8(_read_png(root / f["visible"])),
            infrared=_from_u8(_read_png(root / f["infrared"])),
            fused=_from_u8(_read_png(root / f["fused"])),
            candidate_masks=cands,
            voted_mask=(_read_png(root / f["voted_mask"]) > 0).astype(np.uint8),
            text_ids=list(r["text_ids"]),
            det_targets=DetectionTargets(np.asarray(r["boxes"], dtype=np.float64).reshape(-1, 4),
                                         np.asarray(r["labels"], dtype=np.int64), (h, w)),
            seg_labels=_read_png(root / f["seg"]).astype(np.uint8),
            seed=int(r["seed"]),
            requested_targets=int(r["requested_targets"]),
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def load_dataset(root, split: str | None = None) -> Dataset:
    return Dataset(load_manifest(root), split)


def directory_digest(root) -> str:
    """SHA-256 over every file (relative path + bytes) under ``root``, in sorted order."""
    root = Path(root)
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            p = Path(dirpath) / name
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
