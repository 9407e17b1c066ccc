import hashlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from alanet.data import (
    DatasetManifest,
    ImageRecord,
    ManifestEntry,
    NUM_KEYPOINTS,
    augment,
    decode_gender,
    encode_gender,
    keypoints_to_boxes,
    load_image,
    load_records,
    pad_or_crop,
    resize_keep_aspect,
    synth_generate,
)


def dummy_keypoints(h, w):
    xs = np.linspace(5, w - 6, NUM_KEYPOINTS)
    ys = np.linspace(5, h - 6, NUM_KEYPOINTS)
    return np.stack([xs, ys], axis=1)


class TestGender:
    def test_pinned(self):
        assert encode_gender("female") == 0
        assert encode_gender("male") == 1

    def test_round_trip(self):
        for g in ("female", "male"):
            assert decode_gender(encode_gender(g)) == g

    def test_unknown(self):
        with pytest.raises(ValueError):
            encode_gender("other")
        with pytest.raises(ValueError):
            decode_gender(2)


class TestResize:
    def test_exact_halving(self):
        img = np.zeros((768, 1024), dtype=np.float32)
        out, _, scale = resize_keep_aspect(img, dummy_keypoints(768, 1024), 512)
        assert out.shape == (384, 512)
        assert scale == 0.5

    def test_identity(self):
        img = np.random.default_rng(0).uniform(size=(400, 512)).astype(np.float32)
        out, kps, scale = resize_keep_aspect(img, dummy_keypoints(400, 512), 512)
        assert scale == 1.0
        np.testing.assert_array_equal(out, img)

    def test_keypoints_scaled(self):
        img = np.zeros((480, 640), dtype=np.float32)
        kps = dummy_keypoints(480, 640)
        kps[0] = [320.0, 240.0]
        out, scaled, scale = resize_keep_aspect(img, kps, 512)
        assert out.shape == (384, 512)
        assert scale == pytest.approx(0.8)
        np.testing.assert_allclose(scaled[0], [256.0, 192.0])

    def test_long_side_exact(self):
        img = np.zeros((123, 77), dtype=np.float32)
        out, _, _ = resize_keep_aspect(img, dummy_keypoints(123, 77), 512)
        assert max(out.shape) == 512
        # aspect preserved to within a pixel of rounding
        assert abs(out.shape[1] - 77 * 512 / 123) <= 1

    def test_degenerate_image(self):
        with pytest.raises(ValueError):
            resize_keep_aspect(np.zeros((0, 10), dtype=np.float32), np.zeros((0, 2)), 512)


class TestKeypointsToBoxes:
    def test_centered(self):
        boxes = keypoints_to_boxes(np.array([[100.0, 100.0]]), box_size=64)
        np.testing.assert_allclose(boxes[0], [68, 68, 132, 132])

    def test_clamped_at_origin(self):
        boxes = keypoints_to_boxes(np.array([[10.0, 10.0]]), box_size=64, image_size=(512, 512))
        np.testing.assert_allclose(boxes[0], [0, 0, 42, 42])

    def test_tiny_box(self):
        boxes = keypoints_to_boxes(np.array([[256.0, 256.0]]), box_size=2)
        np.testing.assert_allclose(boxes[0], [255, 255, 257, 257])

    def test_resize_then_boxes_centers_match(self, rng):
        img = np.zeros((480, 640), dtype=np.float32)
        kps = np.stack(
            [rng.uniform(40, 600, NUM_KEYPOINTS), rng.uniform(40, 440, NUM_KEYPOINTS)], axis=1
        )
        _, scaled, _ = resize_keep_aspect(img, kps, 512)
        boxes = keypoints_to_boxes(scaled, box_size=64)
        centers = (boxes[:, :2] + boxes[:, 2:]) / 2
        assert np.max(np.abs(centers - scaled)) <= 0.5


class TestAugment:
    def test_hflip_pinned(self):
        img = np.zeros((512, 512), dtype=np.float32)
        _, boxes = augment(img, np.array([[10.0, 20.0, 74.0, 84.0]]), hflip=True, scale_factor=1.0)
        np.testing.assert_allclose(boxes[0], [438, 20, 502, 84])

    def test_identity(self, rng):
        img = rng.uniform(size=(64, 48)).astype(np.float32)
        boxes = np.array([[1.0, 2.0, 11.0, 12.0]])
        out_img, out_boxes = augment(img, boxes, hflip=False, scale_factor=1.0)
        np.testing.assert_array_equal(out_img, img)
        np.testing.assert_array_equal(out_boxes, boxes)

    def test_half_scale(self):
        img = np.zeros((512, 512), dtype=np.float32)
        out_img, boxes = augment(
            img, np.array([[100.0, 100.0, 164.0, 164.0]]), hflip=False, scale_factor=0.5
        )
        assert out_img.shape == (256, 256)
        np.testing.assert_allclose(boxes[0], [50, 50, 82, 82])

    @given(st.integers(0, 30))
    def test_double_hflip_is_identity_on_boxes(self, seed):
        # box coordinates from keypoint conversion are half-integers, for
        # which reflection is exact in floating point
        rng = np.random.default_rng(seed)
        img = np.zeros((128, 128), dtype=np.float32)
        kps = np.round(rng.uniform(20, 100, size=(NUM_KEYPOINTS, 2)) * 2) / 2
        boxes = keypoints_to_boxes(kps, box_size=33)
        _, once = augment(img, boxes, hflip=True, scale_factor=1.0)
        _, twice = augment(img, once, hflip=True, scale_factor=1.0)
        np.testing.assert_array_equal(twice, boxes)

    def test_bad_scale(self):
        with pytest.raises(ValueError):
            augment(np.zeros((4, 4), dtype=np.float32), np.zeros((0, 4)), False, 0.0)


class TestPadOrCrop:
    def test_pad(self):
        out = pad_or_crop(np.ones((3, 4), dtype=np.float32), 5, 6)
        assert out.shape == (5, 6)
        assert out[:3, :4].min() == 1.0
        assert out[3:].max() == 0.0

    def test_crop(self):
        out = pad_or_crop(np.ones((8, 9), dtype=np.float32), 5, 6)
        assert out.shape == (5, 6)


def tree_digest(root: Path) -> dict:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


class TestSynthGenerate:
    def test_deterministic(self, tmp_path):
        a = synth_generate(8, seed=0, out_dir=tmp_path / "a", image_size=96, age_range=(5, 50))
        b = synth_generate(8, seed=0, out_dir=tmp_path / "b", image_size=96, age_range=(5, 50))
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
        assert len(a) == len(b) == 8

    def test_seed_changes_output(self, tmp_path):
        synth_generate(4, seed=0, out_dir=tmp_path / "a", image_size=96)
        synth_generate(4, seed=1, out_dir=tmp_path / "b", image_size=96)
        assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "b")

    def test_records_pass_invariants(self, tmp_path):
        manifest = synth_generate(6, seed=3, out_dir=tmp_path, image_size=128, age_range=(0, 60))
        for rec in load_records(manifest):
            rec.validate(num_ranks=64)

    def test_blob_centers_equal_manifest_keypoints(self, tmp_path):
        manifest = synth_generate(3, seed=7, out_dir=tmp_path, image_size=128, age_range=(40, 60))
        for entry in manifest.entries:
            img = load_image(manifest.root / entry.image_path)
            for x, y in entry.keypoints:
                xi, yi = int(round(x)), int(round(y))
                patch = img[max(0, yi - 2) : yi + 3, max(0, xi - 2) : xi + 3]
                assert patch.max() > 0.3  # a bright blob sits at the keypoint

    def test_appearance_monotone_in_age(self, tmp_path):
        manifest = synth_generate(16, seed=0, out_dir=tmp_path, image_size=96, age_range=(0, 60))
        ages, means, peaks = [], [], []
        for entry in manifest.entries:
            img = load_image(manifest.root / entry.image_path)
            ages.append(entry.age_months)
            means.append(float(img.mean()))
            peaks.append(float(img.max()))
        ages = np.asarray(ages, dtype=float)
        assert np.corrcoef(ages, means)[0, 1] > 0.9
        assert np.corrcoef(ages, peaks)[0, 1] > 0.9
        oldest, youngest = int(np.argmax(ages)), int(np.argmin(ages))
        assert means[oldest] > means[youngest]
        assert peaks[oldest] > peaks[youngest]

    def test_bad_args(self, tmp_path):
        with pytest.raises(ValueError):
            synth_generate(0, seed=0, out_dir=tmp_path)
        with pytest.raises(ValueError):
            synth_generate(1, seed=0, out_dir=tmp_path, age_range=(10, 5))


class TestManifest:
    def test_round_trip(self, tmp_path):
        manifest = synth_generate(4, seed=2, out_dir=tmp_path, image_size=96)
        loaded = DatasetManifest.load(tmp_path / "manifest.tsv")
        assert len(loaded) == 4
        for a, b in zip(manifest.entries, loaded.entries):
            assert a.image_path == b.image_path
            assert a.age_months == b.age_months
            assert a.gender == b.gender
            np.testing.assert_array_equal(a.keypoints, b.keypoints)

    def test_line_format(self, tmp_path):
        synth_generate(2, seed=0, out_dir=tmp_path, image_size=96)
        lines = (tmp_path / "manifest.tsv").read_text().strip().splitlines()
        assert len(lines) == 2
        fields = lines[0].split("\t")
        assert len(fields) == 4
        assert fields[0].endswith(".png")
        int(fields[1])
        assert fields[2] in ("female", "male")
        assert len(fields[3].split(";")) == NUM_KEYPOINTS

    def test_duplicate_paths_rejected(self):
        entry = ManifestEntry("x.png", 10, "female", np.zeros((NUM_KEYPOINTS, 2)))
        with pytest.raises(ValueError):
            DatasetManifest(entries=[entry, entry]).validate()

    def test_age_range_rejected(self):
        entry = ManifestEntry("x.png", 70, "female", np.zeros((NUM_KEYPOINTS, 2)))
        with pytest.raises(ValueError):
            DatasetManifest(entries=[entry]).validate(num_ranks=64)


class TestImageRecord:
    def test_keypoint_count_enforced(self):
        img = np.zeros((32, 32), dtype=np.float32)
        with pytest.raises(ValueError):
            ImageRecord(img, 10, "female", np.zeros((5, 2))).validate()

    def test_out_of_bounds_keypoint(self):
        img = np.zeros((32, 32), dtype=np.float32)
        kps = dummy_keypoints(32, 32)
        kps[0] = [40.0, 2.0]
        with pytest.raises(ValueError):
            ImageRecord(img, 10, "female", kps).validate()

    def test_age_below_rank_count(self):
        img = np.zeros((32, 32), dtype=np.float32)
        rec = ImageRecord(img, 70, "male", dummy_keypoints(32, 32))
        rec.validate()  # fine without a rank bound
        with pytest.raises(ValueError):
            rec.validate(num_ranks=64)
