import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from semsplat.dataset import (
    Frame,
    load_frame,
    load_dataset,
    split_train_test,
    save_image_rgb,
    save_mask,
)
from semsplat.exceptions import DataError, LabelRangeError

from conftest import make_camera


def _write_frame_files(tmp_path, rgb, mask, stem="frame"):
    image_path = tmp_path / f"{stem}.png"
    mask_path = tmp_path / f"{stem}_mask.png"
    Image.fromarray(rgb, mode="RGB").save(image_path)
    Image.fromarray(mask, mode="L").save(mask_path)
    return image_path, mask_path


class TestLoadFrame:
    def test_black_image_loads_as_zero(self, tmp_path):
        rgb = np.zeros((4, 4, 3), dtype=np.uint8)
        mask = np.zeros((4, 4), dtype=np.uint8)
        ip, mp = _write_frame_files(tmp_path, rgb, mask)
        frame = load_frame(ip, mp, make_camera(size=4), num_classes=2)
        np.testing.assert_array_equal(frame.rgb, 0.0)

    def test_constant_mask(self, tmp_path):
        rgb = np.zeros((4, 4, 3), dtype=np.uint8)
        mask = np.full((4, 4), 3, dtype=np.uint8)
        ip, mp = _write_frame_files(tmp_path, rgb, mask)
        frame = load_frame(ip, mp, make_camera(size=4), num_classes=5)
        assert np.all(frame.mask == 3)

    def test_out_of_range_label_cites_pixel(self, tmp_path):
        rgb = np.zeros((4, 4, 3), dtype=np.uint8)
        mask = np.zeros((4, 4), dtype=np.uint8)
        mask[2, 1] = 7
        ip, mp = _write_frame_files(tmp_path, rgb, mask)
        with pytest.raises(LabelRangeError, match=r"x=1, y=2"):
            load_frame(ip, mp, make_camera(size=4), num_classes=5)

    def test_ignore_label_allowed(self, tmp_path):
        rgb = np.zeros((4, 4, 3), dtype=np.uint8)
        mask = np.full((4, 4), 255, dtype=np.uint8)
        ip, mp = _write_frame_files(tmp_path, rgb, mask)
        frame = load_frame(ip, mp, make_camera(size=4), num_classes=3)
        assert np.all(frame.mask == 255)

    def test_size_mismatch_rejected(self, tmp_path):
        rgb = np.zeros((4, 4, 3), dtype=np.uint8)
        mask = np.zeros((4, 4), dtype=np.uint8)
        ip, mp = _write_frame_files(tmp_path, rgb, mask)
        with pytest.raises(DataError, match="camera expects"):
            load_frame(ip, mp, make_camera(size=8), num_classes=2)

    def test_mask_size_mismatch_rejected(self, tmp_path):
        rgb = np.zeros((4, 4, 3), dtype=np.uint8)
        mask = np.zeros((4, 6), dtype=np.uint8)
        ip, mp = _write_frame_files(tmp_path, rgb, mask)
        with pytest.raises(DataError, match="mask"):
            load_frame(ip, mp, make_camera(size=4), num_classes=2)

    def test_unreadable_file(self, tmp_path):
        bad = tmp_path / "nope.png"
        bad.write_bytes(b"this is not a png")
        with pytest.raises(DataError):
            load_frame(bad, bad, make_camera(size=4), num_classes=2)

    def test_rgb_normalization_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        rgb = rng.integers(0, 256, (4, 4, 3)).astype(np.uint8)
        mask = np.zeros((4, 4), dtype=np.uint8)
        ip, mp = _write_frame_files(tmp_path, rgb, mask)
        frame = load_frame(ip, mp, make_camera(size=4), num_classes=1)
        np.testing.assert_allclose(frame.rgb, rgb / 255.0)

    @settings(deadline=None, max_examples=30)
    @given(seed=st.integers(0, 2**31), num_classes=st.integers(2, 6))
    def test_adversarial_masks_cannot_slip_through(self, tmp_path_factory, seed, num_classes):
        # Every admitted frame satisfies the mask-range invariant; any mask
        # holding a value outside {0..C-1, 255} must be rejected.
        tmp_path = tmp_path_factory.mktemp("adv")
        rng = np.random.default_rng(seed)
        mask = rng.integers(0, 256, (4, 4)).astype(np.uint8)
        rgb = np.zeros((4, 4, 3), dtype=np.uint8)
        ip, mp = _write_frame_files(tmp_path, rgb, mask)
        legal = np.all((mask < num_classes) | (mask == 255))
        if legal:
            frame = load_frame(ip, mp, make_camera(size=4), num_classes=num_classes)
            valid = (frame.mask != 255) & ((frame.mask < 0) | (frame.mask >= num_classes))
            assert not valid.any()
        else:
            with pytest.raises(LabelRangeError):
                load_frame(ip, mp, make_camera(size=4), num_classes=num_classes)


def _frames(names):
    cam = make_camera(size=4)
    return [
        Frame(rgb=np.zeros((4, 4, 3)), mask=np.zeros((4, 4), dtype=np.int64), camera=cam, name=n)
        for n in names
    ]


class TestSplit:
    def test_sixteen_frames_holdout_eight(self):
        split = split_train_test(_frames([f"f{i:02d}" for i in range(16)]), 8)
        assert [f.name for f in split.test] == ["f00", "f08"]
        assert len(split.train) == 14

    def test_fewer_frames_than_holdout(self):
        with pytest.warns(UserWarning, match="test split is empty"):
            split = split_train_test(_frames([f"f{i}" for i in range(7)]), 8)
        assert len(split.train) == 7 and split.test == []

    def test_hundred_frames(self):
        split = split_train_test(_frames([f"f{i:03d}" for i in range(100)]), 8)
        assert len(split.test) == 13  # indices 0, 8, ..., 96

    def test_sorted_by_name_not_input_order(self):
        names = [f"f{i:02d}" for i in range(16)]
        split = split_train_test(_frames(list(reversed(names))), 8)
        assert [f.name for f in split.test] == ["f00", "f08"]

    def test_union_is_partition(self):
        frames = _frames([f"f{i:02d}" for i in range(21)])
        split = split_train_test(frames, 4)
        names = sorted(f.name for f in split.train + split.test)
        assert names == sorted(f.name for f in frames)
        assert not set(f.name for f in split.train) & set(f.name for f in split.test)

    def test_determinism(self):
        frames = _frames([f"f{i:02d}" for i in range(30)])
        a = split_train_test(frames, 8)
        b = split_train_test(list(reversed(frames)), 8)
        assert [f.name for f in a.test] == [f.name for f in b.test]
        assert [f.name for f in a.train] == [f.name for f in b.train]

    def test_holdout_must_be_at_least_two(self):
        with pytest.raises(DataError):
            split_train_test(_frames(["a"]), 1)


class TestLoadDataset:
    def test_toy_dataset_layout(self, toy_dataset_dir):
        ds = load_dataset(toy_dataset_dir)
        assert ds.classes.names == ("ground", "foliage", "sky")
        assert len(ds.split.train) == 21 and len(ds.split.test) == 3
        frame = ds.split.train[0]
        assert frame.rgb.shape == (64, 64, 3)
        assert frame.camera.width == 64
        assert ds.scene_extent() > 1.0

    def test_missing_masks_dir_is_actionable(self, toy_dataset_dir, tmp_path):
        import shutil

        broken = tmp_path / "broken"
        shutil.copytree(toy_dataset_dir, broken)
        shutil.rmtree(broken / "masks")
        with pytest.raises(DataError, match="masks"):
            load_dataset(broken)

    def test_missing_image_file(self, toy_dataset_dir, tmp_path):
        import shutil

        broken = tmp_path / "broken2"
        shutil.copytree(toy_dataset_dir, broken)
        (broken / "images" / "frame_000.png").unlink()
        with pytest.raises(DataError, match="frame_000"):
            load_dataset(broken)


class TestImageIO:
    def test_save_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        rgb = rng.integers(0, 256, (8, 8, 3)) / 255.0
        save_image_rgb(tmp_path / "x.png", rgb)
        loaded = np.asarray(Image.open(tmp_path / "x.png")) / 255.0
        np.testing.assert_allclose(loaded, rgb, atol=1e-12)

    def test_mask_round_trip(self, tmp_path):
        mask = np.array([[0, 1], [255, 3]], dtype=np.int64)
        save_mask(tmp_path / "m.png", mask)
        loaded = np.asarray(Image.open(tmp_path / "m.png"))
        np.testing.assert_array_equal(loaded, mask)

    def test_mask_range_guard(self, tmp_path):
        with pytest.raises(DataError):
            save_mask(tmp_path / "m.png", np.array([[300]]))
