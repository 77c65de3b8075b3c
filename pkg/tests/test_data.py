"""Synthetic scenes, mask voting, augmentation and dataset persistence."""
import json
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from mambatrans.data import (
    TOKEN_ID, VOCAB, DataError, DatasetManifest, augment, directory_digest, generate_dataset,
    generate_scene, load_dataset, mask_vote, save_dataset,
)


def component_boxes(seg):
    """Independent box oracle: bounding boxes and classes of connected target regions."""
    comps, n = ndimage.label(seg > 0)
    out = []
    for k, sl in enumerate(ndimage.find_objects(comps), start=1):
        ys, xs = sl
        cls = int(np.bincount(seg[comps == k]).argmax()) - 1
        out.append((float(xs.start), float(ys.start), float(xs.stop), float(ys.stop), cls))
    return sorted(out)


def target_boxes(sample):
    t = sample.det_targets
    return sorted((*map(float, b), int(c)) for b, c in zip(t.boxes, t.labels))


def assert_samples_equal(a, b):
    for name in ("visible", "infrared", "fused", "candidate_masks", "voted_mask", "seg_labels"):
        x, y = getattr(a, name), getattr(b, name)
        assert x.dtype == y.dtype and x.shape == y.shape, name
        np.testing.assert_array_equal(x, y, err_msg=name)
    assert a.text_ids == b.text_ids
    np.testing.assert_array_equal(a.det_targets.boxes, b.det_targets.boxes)
    np.testing.assert_array_equal(a.det_targets.labels, b.det_targets.labels)


def test_vocabulary_has_64_unique_tokens():
    assert len(VOCAB) == 64 == len(set(VOCAB)) == len(TOKEN_ID)


class TestScene:
    def test_no_targets(self):
        s = generate_scene(5, 40, 48, 0)
        assert len(s.det_targets) == 0
        assert s.det_targets.boxes.shape == (0, 4)
        assert not s.seg_labels.any() and not s.voted_mask.any()
        assert s.size == (40, 48)

    def test_deterministic(self):
        assert_samples_equal(generate_scene(11, 64, 64, 4), generate_scene(11, 64, 64, 4))

    def test_seed_changes_scene(self):
        assert not np.array_equal(generate_scene(1).visible, generate_scene(2).visible)

    @pytest.mark.parametrize("seed", range(6))
    def test_boxes_match_rendered_shapes(self, seed):
        s = generate_scene(seed, 64, 64, 5)
        assert component_boxes(s.seg_labels) == target_boxes(s)

    def test_fields_consistent(self):
        s = generate_scene(3, 48, 56, 3)
        for img in (s.visible, s.infrared, s.fused):
            assert img.shape == (48, 56, 3) and img.dtype == np.float32
            assert img.min() >= 0.0 and img.max() <= 1.0
        assert s.candidate_masks.shape == (3, 48, 56)
        np.testing.assert_array_equal(s.voted_mask, mask_vote(*s.candidate_masks))
        assert s.text_ids[0] == TOKEN_ID["<bos>"] and s.text_ids[-1] == TOKEN_ID["<eos>"]

    def test_fused_is_off_distribution(self):
        s = generate_scene(4)
        assert np.abs(s.fused - s.visible).mean() > 0.05

    def test_crowded_scene_records_shortfall(self):
        s = generate_scene(0, 32, 32, 8)
        assert s.requested_targets == 8
        assert s.placed_targets < 8

    @pytest.mark.parametrize("kwargs", [dict(H=16), dict(W=31), dict(num_targets=9), dict(num_targets=-1)])
    def test_preconditions(self, kwargs):
        with pytest.raises(ValueError):
            generate_scene(0, **{"H": 64, "W": 64, "num_targets": 1, **kwargs})


class TestVote:
    @pytest.mark.parametrize("bits", list(itertools.product([0, 1], repeat=3)))
    def test_majority_rule(self, bits):
        m = [np.full((2, 2), b, dtype=np.uint8) for b in bits]
        assert int(mask_vote(*m)[0, 0]) == int(sum(bits) >= 2)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_symmetric_and_unanimous(self, seed):
        rng = np.random.default_rng(seed)
        ms = [rng.integers(0, 2, (5, 6)).astype(np.uint8) for _ in range(3)]
        ref = mask_vote(*ms)
        for perm in itertools.permutations(ms):
            np.testing.assert_array_equal(mask_vote(*perm), ref)
        np.testing.assert_array_equal(mask_vote(ms[0], ms[0], ms[0]), ms[0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mask_vote(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 3)))


class TestAugment:
    def test_double_forced_flip_is_identity(self):
        s = generate_scene(7)
        twice = augment(augment(s, 0, 64, force_flip=True), 0, 64, force_flip=True)
        assert_samples_equal(twice, s)

    def test_full_crop_without_flip_is_identity(self):
        s = generate_scene(8)
        assert_samples_equal(augment(s, 3, 64, force_flip=False), s)

    def test_flip_box_arithmetic(self):
        s = generate_scene(0, 100, 100, 0)
        s.det_targets.boxes = np.array([[10.0, 5.0, 20.0, 15.0]])
        s.det_targets.labels = np.array([1])
        out = augment(s, 0, 100, force_flip=True)
        np.testing.assert_array_equal(out.det_targets.boxes, [[80.0, 5.0, 90.0, 15.0]])

    @given(st.integers(0, 2**31 - 1), st.integers(16, 64))
    @settings(max_examples=25, deadline=None)
    def test_labels_follow_pixels(self, seed, crop):
        """Every visible target region lies inside a box of its class; every box covers its class."""
        s = generate_scene(seed % 50, 64, 64, 4)
        out = augment(s, seed, crop)
        assert out.size == (crop, crop)
        assert out.text_ids == s.text_ids
        boxes = target_boxes(out)
        for x1, y1, x2, y2, cls in component_boxes(out.seg_labels):
            if (x2 - x1) * (y2 - y1) < 4:
                continue
            assert any(c == cls and bx1 <= x1 and by1 <= y1 and x2 <= bx2 and y2 <= by2
                       for bx1, by1, bx2, by2, c in boxes), (x1, y1, x2, y2, cls)
        for x1, y1, x2, y2, cls in boxes:
            assert (out.seg_labels[int(y1):int(y2), int(x1):int(x2)] == cls + 1).any()

    def test_crop_too_large(self):
        with pytest.raises(ValueError):
            augment(generate_scene(0, 32, 32, 1), 0, 33)


class TestPersistence:
    def test_round_trip_bit_identical(self, tmp_path):
        samples = generate_dataset(3, 8, 32)
        save_dataset(samples, tmp_path)
        loaded = load_dataset(tmp_path)
        assert len(loaded) == 8
        for a, b in zip(samples, loaded):
            assert_samples_equal(a, b)

    def test_missing_file_is_named(self, tmp_path):
        save_dataset(generate_dataset(0, 2, 32), tmp_path)
        (tmp_path / "fused" / "0001.png").unlink()
        with pytest.raises(DataError, match="0001.png"):
            load_dataset(tmp_path)

    def test_corrupt_file_is_named(self, tmp_path):
        save_dataset(generate_dataset(0, 1, 32), tmp_path)
        (tmp_path / "seg" / "0000.png").write_bytes(b"not a png")
        ds = load_dataset(tmp_path)
        with pytest.raises(DataError, match="0000.png"):
            ds[0]

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError, match="manifest.json"):
            load_dataset(tmp_path)

    def test_overlapping_splits_rejected(self, tmp_path):
        rec = {"id": "0000", "split": "train"}
        with pytest.raises(DataError):
            DatasetManifest(tmp_path, [rec, {**rec, "split": "test"}])

    def test_split_selection(self, tmp_path):
        save_dataset(generate_dataset(0, 4, 32), tmp_path, splits=["train", "train", "val", "test"])
        assert [len(load_dataset(tmp_path, s)) for s in ("train", "val", "test")] == [2, 1, 1]

    def test_manifest_canonical_and_digest_stable(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        save_dataset(generate_dataset(9, 3, 32), a)
        save_dataset(generate_dataset(9, 3, 32), b)
        text = (a / "manifest.json").read_text()
        assert text == json.dumps(json.loads(text), sort_keys=True, indent=1) + "\n"
        assert directory_digest(a) == directory_digest(b)
        save_dataset(generate_dataset(10, 3, 32), b)
        assert directory_digest(a) != directory_digest(b)
