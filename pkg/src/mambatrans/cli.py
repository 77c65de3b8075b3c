"""Command-line entry point: ``mambatrans <command> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import gradsuite
from .attention import ConfigError
from .config import RunConfig, load_run_config
from .data import SPLITS, TOKEN_ID, DataError, Sample, generate_dataset, load_dataset, save_dataset
from .detector import load_detector
from .gradcheck import NumericError
from .losses import TACConfig
from .metrics import MetricReport, mean_average_precision
from .model import CheckpointMismatch, TranslatorModel, load_model, save_model, translate
from .serialize import FormatError
from .tensor import no_grad
from .train import NumericAbort, pretrain_detector, train, write_curve

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DATA_ROOT_ENV = "MTRANS_DATA_ROOT"
_DATASET_ENTRIES = ("images", "ir", "fused", "masks", "seg", "manifest.json")

log = logging.getLogger("mambatrans")


class UsageError(Exception):
    pass


def _data_root(args) -> Path:
    root = args.data_root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise UsageError(f"--data-root is required (or set {DATA_ROOT_ENV})")
    return Path(root)


def _samples(root: Path, split: str) -> list[Sample]:
    ds = load_dataset(root, split)
    if len(ds) == 0:
        raise DataError(f"split {split!r} of {root} is empty")
    return list(ds)


def _read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / np.float32(255.0)


def _read_mask(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 0).astype(np.uint8)


def _read_text(path) -> list[int]:
    """Whitespace-separated token ids or vocabulary words."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    ids = []
    for tok in path.read_text().split():
        if tok.lstrip("-").isdigit():
            ids.append(int(tok))
        elif tok in TOKEN_ID:
            ids.append(TOKEN_ID[tok])
        else:
            ids.append(TOKEN_ID["<unk>"])
    return ids


def _write_image(path, img: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)).save(path, format="PNG")


# -- commands ------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"{out} is not empty; pass --force to overwrite")
        for name in _DATASET_ENTRIES:
            p = out / name
            if p.is_dir():
                shutil.rmtree(p)
            elif p.exists():
                p.unlink()
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    if args.size < 32:
        raise UsageError(f"--size {args.size} is below the generator minimum of 32")
    total = args.count + args.val_count + args.test_count
    samples = generate_dataset(args.seed, total, args.size)
    splits = ["train"] * args.count + ["val"] * args.val_count + ["test"] * args.test_count
    save_dataset(samples, out, splits, generator_seed=args.seed)
    print(f"wrote {total} samples to {out}")
    return EXIT_OK


def cmd_pretrain_det(args) -> int:
    cfg = load_run_config(args.config, args.set)
    samples = _samples(_data_root(args), args.split)
    p = cfg.pretrain
    _, curve = pretrain_detector(samples, p.steps, p.seed, cfg.detector, lr=p.lr,
                                 batch_size=p.batch_size, out_path=args.out)
    if curve:
        print(f"detector loss {curve[0]:.4f} -> {np.mean(curve[-10:]):.4f}; saved {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.set)
    if args.dump_config:
        cfg.dump(args.dump_config)
    samples = _samples(_data_root(args), args.split)
    det = load_detector(args.det)
    if args.init:
        model = load_model(args.init, expected=cfg.model)
    else:
        model = TranslatorModel(cfg.model, seed=cfg.train.seed)
    tac = TACConfig(cfg.loss.charbonnier(), cfg.loss.lam, cfg.loss.theta, detector=det)
    result = train(model, samples, det, cfg.train, tac)
    save_model(args.out, model)
    if args.curve:
        write_curve(args.curve, result.curve)
    if result.curve:
        print(f"TAC {result.curve[0]['total']:.4f} -> {result.curve[-1]['total']:.4f}; saved {args.out}")
    return EXIT_OK


def cmd_translate(args) -> int:
    expected = load_run_config(args.config, args.set).model if (args.config or args.set) else None
    model = load_model(args.ckpt, expected=expected)
    if args.image:
        if not (args.mask and args.text):
            raise UsageError("--image needs --mask and --text")
        img, mask, ids = _read_image(args.image), _read_mask(args.mask), _read_text(args.text)
        if mask.shape != img.shape[:2]:
            raise DataError(f"mask {mask.shape} does not match image {img.shape[:2]}")
        with no_grad():
            out = translate(img, mask, ids, model).data
        _write_image(args.out, out)
        return EXIT_OK
    root = _data_root(args)
    ds = load_dataset(root, args.split)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with no_grad():
        for i, s in enumerate(ds):
            rec = ds.manifest.records[ds.indices[i]]
            _write_image(out_dir / f"{rec['id']}.png", translate(s.fused, s.voted_mask, s.text_ids, model).data)
    print(f"translated {len(ds)} images into {out_dir}")
    return EXIT_OK


def _load_boxes(path, need_scores: bool) -> list:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"box file {path} is not valid JSON: {exc}") from exc
    images = doc["images"] if isinstance(doc, dict) else doc
    out = []
    for im in images:
        boxes = np.asarray(im.get("boxes", []), dtype=np.float64).reshape(-1, 4)
        labels = [int(x) for x in im.get("labels", [])]
        if need_scores:
            scores = im.get("scores", [1.0] * len(labels))
            out.append([(b.tolist(), float(s), l) for b, s, l in zip(boxes, scores, labels)])
        else:
            out.append({"boxes": boxes, "labels": np.asarray(labels, dtype=np.int64)})
    return out


def cmd_eval(args) -> int:
    report = MetricReport()
    interp = args.interpolation
    if args.pred_boxes or args.target_boxes:
        if not (args.pred_boxes and args.target_boxes):
            raise UsageError("--pred-boxes and --target-boxes go together")
        preds = _load_boxes(args.pred_boxes, True)
        targets = _load_boxes(args.target_boxes, False)
        report.detection = mean_average_precision(preds, targets, interpolation=interp)
    else:
        root = _data_root(args)
        ds = load_dataset(root, args.split)
        det = load_detector(args.det) if args.det else None
        preds, targets = [], []
        for i, s in enumerate(ds):
            rec = ds.manifest.records[ds.indices[i]]
            img = _read_image(Path(args.images) / f"{rec['id']}.png") if args.images else s.fused
            report.add_image(rec["id"], img, reference=s.visible)
            if det is not None:
                preds.append(det.predict(img))
                targets.append(s.det_targets)
        if det is not None:
            report.detection = mean_average_precision(preds, targets, interpolation=interp)
    text = report.to_json() if args.format == "json" else report.to_table()
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    try:
        cases = gradsuite.select(args.module)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    results = []
    for case in cases:
        res = gradsuite.run_case(case, args.precision)
        results.append(res)
        print(res.line(), flush=True)
    passed, total = gradsuite.summarize(results)
    if args.precision == 32:
        print(f"32-bit run is informational: {total} cases reported")
        return EXIT_OK
    print(f"{passed}/{total} gradient checks passed")
    return EXIT_OK if passed == total else EXIT_NUMERIC


# -- parser --------------------------------------------------------------

def _add_config(p) -> None:
    p.add_argument("--config", help="flat JSON config with dotted keys")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mambatrans", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=8, help="training samples")
    p.add_argument("--val-count", type=int, default=0)
    p.add_argument("--test-count", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain-det", help="pre-train and freeze the surrogate detector")
    _add_config(p)
    p.add_argument("--data-root")
    p.add_argument("--split", default="train", choices=SPLITS)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pretrain_det)

    p = sub.add_parser("train", help="train the translator")
    _add_config(p)
    p.add_argument("--data-root")
    p.add_argument("--split", default="train", choices=SPLITS)
    p.add_argument("--det", required=True, help="frozen detector checkpoint")
    p.add_argument("--init", help="start from this model checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--curve", help="write the loss curve CSV here")
    p.add_argument("--dump-config", help="write the effective config here")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("translate", help="translate one image or a dataset split")
    _add_config(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image")
    p.add_argument("--mask")
    p.add_argument("--text", help="file of token ids or vocabulary words")
    p.add_argument("--data-root")
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--out", required=True, help="output PNG, or directory for a split")
    p.set_defaults(fn=cmd_translate)

    p = sub.add_parser("eval", help="image-quality metrics and box mAP")
    p.add_argument("--data-root")
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--images", help="directory of images to score (default: the fused inputs)")
    p.add_argument("--det", help="detector checkpoint for mAP")
    p.add_argument("--pred-boxes")
    p.add_argument("--target-boxes")
    p.add_argument("--interpolation", default="area", choices=("area", "coco101"))
    p.add_argument("--format", default="json", choices=("json", "table"))
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("grad-check", help="run the finite-difference gradient suites")
    p.add_argument("--module", default="all", help="all, " + ", ".join(gradsuite.MODULES))
    p.add_argument("--precision", type=int, default=64, choices=(32, 64))
    p.set_defaults(fn=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (UsageError, ConfigError, CheckpointMismatch) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, FileNotFoundError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericAbort, NumericError, FloatingPointError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
