"""Acceptance criteria 1 to 8, each at its stated tolerance, each reporting one PASS/FAIL line."""
import time

import numpy as np
import pytest

from mambatrans import ops
from mambatrans.attention import MMCAConfig
from mambatrans.blocks import MMSSB, mm_ssb, tv_ssm
from mambatrans.cli import EXIT_OK, main
from mambatrans.config import RunConfig
from mambatrans.data import directory_digest, generate_dataset
from mambatrans.detector import DetectionTargets, DetectorConfig, SurrogateDetector
from mambatrans.gradsuite import run_suites, summarize
from mambatrans.losses import CharbonnierConfig, TACConfig, charbonnier_loss, detection_loss, tac_loss
from mambatrans.metrics import entropy_en, mean_average_precision, psnr, spatial_frequency
from mambatrans.model import ModelConfig, TranslatorModel, translate
from mambatrans.ssm import SSMParams, scan3d, selective_scan_1d
from mambatrans.tensor import Tensor
from mambatrans.train import dataset_detection_loss, dataset_tac, pretrain_detector, train, translate_dataset
from oracles import sequential_oracle


def f64(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def test_1_gradient_suite(acceptance_report):
    start = time.perf_counter()
    results = run_suites("all", precision=64)
    seconds = time.perf_counter() - start
    passed, total = summarize(results)
    worst = max(results, key=lambda r: r.max_rel_error)
    ok = passed == total and seconds < 300
    acceptance_report(1, ok, f"{passed}/{total} cases below 1e-4, worst {worst.name} {worst.max_rel_error:.2e}, "
                             f"{seconds:.0f}s of 300s")
    for r in results:
        assert r.passed, r.line()
    assert seconds < 300


def test_2_scan_oracle(acceptance_report):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        L, C, N = (int(v) for v in (rng.integers(1, 33), rng.integers(1, 9), rng.integers(1, 9)))
        p = SSMParams(rng, C, N).to(np.float64)
        p.D.data = rng.standard_normal(C)
        x = rng.standard_normal((L, C))
        y = selective_scan_1d(f64(x), p).data
        worst = max(worst, float(np.abs(y - sequential_oracle(x, p)).max()))
    acceptance_report(2, worst <= 1e-6, f"100 random cases, max abs error {worst:.2e} (limit 1e-6)")
    assert worst <= 1e-6


def test_3_wiring_identities(acceptance_report):
    rng = np.random.default_rng(3)
    c = 8
    block = MMSSB(rng, c, 16, 4, MMCAConfig(c, 2)).to(np.float64)
    block.s.data = rng.uniform(0.5, 2.0, c)
    F_I, F_mask = f64(rng.standard_normal((5, 6, c))), f64(rng.standard_normal((5, 6, c)))
    F_text, mask = f64(rng.standard_normal((4, c))), f64(rng.uniform(0, 1, (5, 6)))

    block.tv_ssm.out_proj.weight.data[...] = 0.0
    block.tv_ssm.out_proj.bias.data[...] = 0.0
    assert not tv_ssm(block.ln1(F_I), F_mask, F_text, block.tv_ssm).data.any()
    _, z = mm_ssb(F_I, F_mask, F_text, mask, block, return_z=True)
    z_ok = np.array_equal(z.data, ops.mul(block.ln1(F_I), block.s).data)

    block.mmca.out_proj.weight.data[...] = 0.0
    block.mmca.out_proj.bias.data[...] = 0.0
    out, z = mm_ssb(F_I, F_mask, F_text, mask, block, return_z=True)
    out_ok = np.array_equal(out.data, z.data)

    w = block.tv_ssm
    scan = scan3d(f64(rng.standard_normal((5, 6, 16))), f64(rng.standard_normal((4, 16))), w.spatial_scans, w.text_scan)
    total = scan.y1.data + scan.y2.data + scan.y3.data + scan.y4.data + scan.y_text.data
    sum_ok = np.array_equal(scan.y.data, total)

    ok = z_ok and out_ok and sum_ok
    acceptance_report(3, ok, f"zero tv_ssm Z==s*LN(F_I): {z_ok}; zero mmca out==Z: {out_ok}; "
                             f"y==y1+y2+y3+y4+y_text: {sum_ok}")
    assert ok


def test_4_loss_identities(acceptance_report):
    rng = np.random.default_rng(4)
    x = rng.random((6, 5, 3))
    cfg = CharbonnierConfig(alpha=0.3, beta=0.9, eps=1e-3)
    zero_diff = charbonnier_loss(f64(x), x, x, cfg).item()
    zero_err = abs(zero_diff - (0.3 + 0.9) * x.size * 1e-3)

    f, v = rng.random((2, 6, 5, 3))
    theta0 = tac_loss(f64(x), f, v, None, TACConfig(charbonnier=cfg, theta=0.0))[0].item()
    theta_ok = theta0 == 5.0 * charbonnier_loss(f64(x), f, v, cfg).item()

    det = SurrogateDetector(DetectorConfig(width=8), seed=4).to(np.float64).freeze()
    targets = DetectionTargets([[4, 6, 20, 22], [18, 2, 30, 12]], [0, 2], (32, 32))
    total, parts = detection_loss(f64(rng.random((32, 32, 3))), targets, det)
    parts_ok = total.item() == ((parts["cls"].item() + parts["bbox"].item()) + parts["obj"].item()) + parts["rpn"].item()

    defaults = TACConfig()
    defaults_ok = (defaults.lam, defaults.theta) == (5.0, 1.0)

    ok = zero_err <= 1e-12 and theta_ok and parts_ok and defaults_ok
    acceptance_report(4, ok, f"zero-difference error {zero_err:.1e}; theta=0 exact: {theta_ok}; "
                             f"four parts sum: {parts_ok}; defaults 5/1: {defaults_ok}")
    assert ok


def test_5_identity_at_init(acceptance_report):
    rng = np.random.default_rng(5)
    fused = rng.random((16, 12, 3)).astype(np.float32)
    mask = (rng.random((16, 12)) > 0.5).astype(np.float32)
    results = []
    for cfg in (ModelConfig(), RunConfig().model):
        model = TranslatorModel(cfg, seed=5)
        assert not model.recon_conv.weight.data.any() and cfg.residual_output
        out = translate(fused, mask, [1, 7, 3, 2], model)
        results.append(out.data.dtype == fused.dtype and out.data.tobytes() == fused.tobytes())
    ok = all(results)
    acceptance_report(5, ok, f"translate(x) bit-identical to x for default and desk configs: {results}")
    assert ok


def test_6_desk_training(acceptance_report):
    """Pinned seeds, desk preset: 8 samples at 64x64, detector 1000 steps, translator 500 steps."""
    start = time.perf_counter()
    run = RunConfig()
    train_set = generate_dataset(seed=0, count=8, size=64)
    test_set = generate_dataset(seed=1, count=8, size=64)
    p = run.pretrain
    det, _ = pretrain_detector(train_set, p.steps, p.seed, run.detector, lr=p.lr, batch_size=p.batch_size)
    assert p.steps == 1000 and run.train.max_steps == 500

    model = TranslatorModel(run.model, seed=run.train.seed)
    tac = TACConfig(run.loss.charbonnier(), run.loss.lam, run.loss.theta, detector=det)
    initial = dataset_tac(model, train_set, tac)
    train(model, train_set, det, run.train, tac)
    final = dataset_tac(model, train_set, tac)
    ratio = final / initial

    raw = dataset_detection_loss([s.fused for s in test_set], test_set, det)
    translated = dataset_detection_loss(translate_dataset(model, test_set), test_set, det)
    improvement = 1.0 - translated / raw
    seconds = time.perf_counter() - start

    ok = ratio <= 0.10 and improvement >= 0.20 and seconds < 900
    acceptance_report(6, ok, f"TAC {initial:.1f} -> {final:.1f} (ratio {ratio:.4f}, limit 0.10); "
                             f"test detection loss {raw:.2f} -> {translated:.2f} "
                             f"(improvement {improvement:.1%}, need 20%); {seconds:.0f}s of 900s")
    assert ratio <= 0.10
    assert improvement >= 0.20
    assert seconds < 900


def test_7_metric_oracles(acceptance_report):
    en = entropy_en(np.arange(256).reshape(16, 16))
    board = (np.indices((8, 8)).sum(axis=0) % 2) * 255.0
    sf_err = abs(spatial_frequency(board) - 255.0 * np.sqrt(2.0))
    p = psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 1.0 / 255.0))
    tg = [{"boxes": np.array([[0, 0, 10, 10], [20, 20, 30, 30]], float), "labels": np.array([0, 0])}]
    perfect = mean_average_precision([[([0, 0, 10, 10], 1.0, 0), ([20, 20, 30, 30], 1.0, 0)]], tg)
    half = mean_average_precision([[([0, 0, 10, 10], 0.9, 0), ([50, 50, 60, 60], 0.4, 0)]], tg)
    checks = {
        "EN=8": en == 8.0,
        "SF": sf_err <= 1e-6,
        "PSNR": abs(p - 48.13) <= 0.01,
        "mAP=1": perfect["mAP50"] == 1.0 and perfect["mAP50_95"] == 1.0,
        "AP50=0.5": half["mAP50"] == 0.5,
    }
    ok = all(checks.values())
    acceptance_report(7, ok, f"EN {en}, SF error {sf_err:.1e}, PSNR {p:.4f} dB, perfect mAP {perfect['mAP50']}, "
                             f"hand case AP50 {half['mAP50']}")
    assert ok, checks


def _cli_run(root):
    root.mkdir()
    data, det, ckpt, out = root / "data", root / "det.ckpt", root / "model.ckpt", root / "translated"
    small = ["--set", "pretrain.steps=40", "--set", "train.max_steps=10"]
    assert main(["gen-data", "--seed", "8", "--count", "4", "--test-count", "2", "--size", "32",
                 "--out", str(data)]) == EXIT_OK
    assert main(["pretrain-det", "--data-root", str(data), "--out", str(det), *small]) == EXIT_OK
    assert main(["train", "--data-root", str(data), "--det", str(det), "--out", str(ckpt), *small]) == EXIT_OK
    assert main(["translate", "--ckpt", str(ckpt), "--data-root", str(data), "--out", str(out)]) == EXIT_OK
    return {
        "data": directory_digest(data),
        "detector": directory_digest(_single(root, det)),
        "model": directory_digest(_single(root, ckpt)),
        "translated": directory_digest(out),
    }


def _single(root, path):
    """Directory holding only ``path``, so the directory digest covers exactly that file."""
    d = root / f"digest_{path.stem}"
    d.mkdir()
    (d / "file").write_bytes(path.read_bytes())
    return d


def test_8_cli_determinism(acceptance_report, tmp_path):
    first = _cli_run(tmp_path / "run1")
    second = _cli_run(tmp_path / "run2")
    same = {k: first[k] == second[k] for k in first}
    ok = all(same.values())
    acceptance_report(8, ok, "identical digests for " + ", ".join(f"{k}={v}" for k, v in same.items()))
    assert ok
