"""Charbonnier, detection and task-aware losses."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mambatrans import ops
from mambatrans.detector import (
    DetectionTargets, DetectorConfig, SurrogateDetector, box_iou, decode_boxes, encode_boxes,
    feature_size, make_anchors, match_anchors,
)
from mambatrans.losses import CharbonnierConfig, TACConfig, charbonnier_loss, detection_loss, tac_loss
from mambatrans.tensor import Tensor, backward


def f64(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def one_box():
    return DetectionTargets([[8.0, 8.0, 24.0, 24.0]], [1], (32, 32))


@pytest.fixture
def det64():
    return SurrogateDetector(DetectorConfig(width=4), seed=3).to(np.float64).freeze()


class TestCharbonnier:
    def test_zero_difference_value(self):
        x = np.full((1, 2, 2), 0.3)
        cfg = CharbonnierConfig(alpha=0.5, beta=0.5, eps=1e-3)
        assert abs(charbonnier_loss(f64(x), x, x, cfg).item() - 4e-3) <= 1e-12

    def test_single_pixel(self):
        cfg = CharbonnierConfig(alpha=1.0, beta=0.0, eps=1e-3)
        val = charbonnier_loss(f64(np.ones((1, 1, 1))), np.zeros((1, 1, 1)), np.zeros((1, 1, 1)), cfg).item()
        assert val == pytest.approx(np.sqrt(1 + 1e-6), abs=1e-15)

    def test_mean_reduction(self, rng):
        x, f, v = (rng.random((3, 4, 3)) for _ in range(3))
        total = charbonnier_loss(f64(x), f, v).item()
        mean = charbonnier_loss(f64(x), f, v, CharbonnierConfig(reduction="mean")).item()
        assert mean == pytest.approx(total / x.size, rel=1e-12)

    @given(st.integers(0, 2**32 - 1), st.floats(0, 2), st.floats(0, 2))
    @settings(max_examples=40, deadline=None)
    def test_lower_bound(self, seed, alpha, beta):
        rng = np.random.default_rng(seed)
        x, f, v = (rng.random((2, 3, 3)) for _ in range(3))
        cfg = CharbonnierConfig(alpha, beta)
        bound = (alpha + beta) * x.size * cfg.eps
        assert charbonnier_loss(f64(x), f, v, cfg).item() >= bound * (1 - 1e-12)
        assert charbonnier_loss(f64(x), x, x, cfg).item() == pytest.approx(bound, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            charbonnier_loss(f64(np.zeros((2, 2, 3))), np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))

    @pytest.mark.parametrize("kwargs", [dict(eps=0.0), dict(alpha=-1.0), dict(reduction="max")])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            CharbonnierConfig(**kwargs)


class TestMatching:
    def test_anchor_grid(self):
        cfg = DetectorConfig()
        assert feature_size(32, 32) == (4, 4) and feature_size(33, 17) == (5, 3)
        a = make_anchors(32, 32, cfg)
        assert a.shape == (16, 4)
        np.testing.assert_array_equal(a[0], [-4, -4, 12, 12])
        np.testing.assert_array_equal(a[5], [4, 4, 20, 20])

    def test_thresholds_and_best_anchor(self):
        cfg = DetectorConfig()
        anchors = make_anchors(32, 32, cfg)
        state, matched = match_anchors(anchors, DetectionTargets([[4, 4, 20, 20]], [0], (32, 32)), cfg)
        assert state[5] == 1 and matched[5] == 0
        ious = box_iou(anchors, [[4, 4, 20, 20]])[:, 0]
        assert np.all(state[(ious < 0.4)] == 0)
        assert np.all(state[(ious >= 0.4) & (ious < 0.5)] == -1)
        tiny = DetectionTargets([[5, 5, 8, 8]], [2], (32, 32))
        state, matched = match_anchors(anchors, tiny, cfg)
        best = int(box_iou(anchors, tiny.boxes)[:, 0].argmax())
        assert state[best] == 1 and matched[best] == 0

    def test_encode_decode_round_trip(self, rng):
        anchors = make_anchors(32, 32, DetectorConfig())
        xy = rng.uniform(0, 20, (16, 2))
        gt = np.hstack([xy, xy + rng.uniform(4, 12, (16, 2))])
        np.testing.assert_allclose(decode_boxes(encode_boxes(gt, anchors), anchors), gt, atol=1e-10)

    def test_targets_validation(self):
        with pytest.raises(ValueError):
            DetectionTargets([[5, 5, 5, 9]], [0], (32, 32))
        with pytest.raises(ValueError):
            DetectionTargets([[0, 0, 40, 9]], [0], (32, 32))


class TestDetectionLoss:
    def test_total_is_sum_of_parts(self, rng, det64):
        total, parts = detection_loss(f64(rng.random((32, 32, 3))), one_box(), det64)
        assert set(parts) == {"cls", "bbox", "obj", "rpn"}
        assert total.item() == ((parts["cls"].item() + parts["bbox"].item()) + parts["obj"].item()) + parts["rpn"].item()

    def test_empty_targets_closed_form(self, rng, det64):
        det64.rpn_head.weight.data[...] = 0.0
        det64.rpn_head.bias.data[...] = 0.0
        total, parts = detection_loss(f64(rng.random((32, 32, 3))), DetectionTargets.empty((32, 32)), det64)
        anchors = feature_size(32, 32)[0] * feature_size(32, 32)[1]
        assert parts["obj"].item() == pytest.approx(anchors * np.log(2.0), abs=1e-12)
        assert parts["cls"].item() == parts["bbox"].item() == parts["rpn"].item() == 0.0
        assert total.item() == parts["obj"].item()

    def test_gradient_reaches_image_not_detector(self, rng, det64):
        before = {k: v.copy() for k, v in det64.state_dict().items()}
        img = Tensor(rng.random((32, 32, 3)), requires_grad=True)
        for _ in range(3):
            img.grad = None
            backward(detection_loss(img, one_box(), det64)[0])
        assert np.abs(img.grad).max() > 0
        assert all(p.grad is None for p in det64.parameters())
        for k, v in det64.state_dict().items():
            assert v.tobytes() == before[k].tobytes()

    def test_image_descent_probe(self, tiny_detector):
        """Plain gradient descent on the image alone lowers the frozen detector's loss."""
        rng = np.random.default_rng(0)
        img = Tensor(rng.uniform(0.3, 0.7, (32, 32, 3)).astype(np.float32), requires_grad=True)
        history = []
        for _ in range(200):
            img.grad = None
            loss = detection_loss(img, one_box(), tiny_detector)[0]
            history.append(loss.item())
            backward(loss)
            img.data -= (2.0 * img.grad).astype(np.float32)
        assert np.mean(history[100:]) < np.mean(history[:100])
        assert np.mean(history[-20:]) < 0.9 * history[0]


class TestTAC:
    def test_default_weights_five_and_one(self):
        cfg = TACConfig()
        assert (cfg.lam, cfg.theta) == (5.0, 1.0)

    def test_theta_zero_is_scaled_charbonnier(self, rng):
        x, f, v = rng.random((3, 8, 8, 3))
        total, parts = tac_loss(f64(x), f, v, None, TACConfig(theta=0.0))
        assert total.item() == 5.0 * charbonnier_loss(f64(x), f, v).item()
        assert set(parts) == {"charbonnier"}

    def test_all_weights_zero(self, rng):
        x, f, v = rng.random((3, 8, 8, 3))
        assert tac_loss(f64(x), f, v, None, TACConfig(lam=0.0, theta=0.0))[0].item() == 0.0

    def test_linear_in_lambda(self, rng, det64):
        x, f, v = rng.random((3, 32, 32, 3))
        lam = 1.7
        one = tac_loss(f64(x), f, v, one_box(), TACConfig(lam=lam, detector=det64))
        two = tac_loss(f64(x), f, v, one_box(), TACConfig(lam=2 * lam, detector=det64))
        assert two[0].item() - one[0].item() == pytest.approx(lam * one[1]["charbonnier"].item(), rel=1e-12)
        assert one[0].item() == pytest.approx(lam * one[1]["charbonnier"].item() + one[1]["detection"].item(), rel=1e-14)

    def test_detector_required(self, rng):
        x = rng.random((8, 8, 3))
        with pytest.raises(ValueError):
            tac_loss(f64(x), x, x, one_box(), TACConfig())
        with pytest.raises(ValueError):
            TACConfig(lam=-1.0)

    def test_frozen_detector_untouched(self, rng, det64):
        before = {k: v.tobytes() for k, v in det64.state_dict().items()}
        x = Tensor(rng.random((32, 32, 3)), requires_grad=True)
        f, v = rng.random((2, 32, 32, 3))
        for _ in range(4):
            backward(ops.mul(tac_loss(x, f, v, one_box(), TACConfig(detector=det64))[0], 1.0))
        assert {k: v.tobytes() for k, v in det64.state_dict().items()} == before
