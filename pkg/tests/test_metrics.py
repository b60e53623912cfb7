import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity

from semsplat.exceptions import InvalidParameterError
from semsplat.metrics import EvalReport, miou, psnr, ssim

from oracles import ref_confusion_iou


def _rand_img(seed, h=24, w=24, c=3):
    return np.random.default_rng(seed).uniform(0, 1, (h, w, c))


def _skimage_ssim(a, b):
    return structural_similarity(
        a,
        b,
        data_range=1.0,
        gaussian_weights=True,
        sigma=1.5,
        use_sample_covariance=False,
        K1=0.01,
        K2=0.03,
        channel_axis=2 if a.ndim == 3 else None,
    )


class TestPsnr:
    def test_identical_capped(self):
        a = _rand_img(0)
        assert psnr(a, a.copy()) == 100.0

    def test_constant_offset_closed_form(self):
        a = np.full((16, 16, 3), 0.4)
        assert abs(psnr(a + 0.1, a) - 20.0) < 1e-6

    def test_matches_mse_oracle(self):
        a, b = _rand_img(1), _rand_img(2)
        direct = 10 * np.log10(1.0 / np.mean((a - b) ** 2))
        assert abs(psnr(a, b) - direct) < 1e-9

    def test_symmetry(self):
        a, b = _rand_img(3), _rand_img(4)
        assert psnr(a, b) == psnr(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidParameterError):
            psnr(np.zeros((4, 4)), np.zeros((5, 4)))


class TestSsim:
    def test_identical_is_one(self):
        a = _rand_img(5)
        assert abs(ssim(a, a.copy()) - 1.0) < 1e-9

    def test_shifted_matches_reference(self):
        a = _rand_img(6)
        b = np.clip(a + 0.1, 0, 1)
        ours = ssim(a, b)
        ref = _skimage_ssim(a, b)
        assert ours < 1.0
        assert abs(ours - ref) < 1e-6

    def test_noise_pair_matches_reference(self):
        a, b = _rand_img(7), _rand_img(8)
        assert abs(ssim(a, b) - _skimage_ssim(a, b)) < 1e-6
        assert abs(ssim(a, b)) < 0.25

    def test_structured_pair_matches_reference(self):
        ys, xs = np.mgrid[0:32, 0:32]
        a = np.repeat((np.sin(xs / 4.0) * 0.5 + 0.5)[:, :, None], 3, axis=2)
        b = np.repeat((np.sin(ys / 4.0) * 0.5 + 0.5)[:, :, None], 3, axis=2)
        assert abs(ssim(a, b) - _skimage_ssim(a, b)) < 1e-6

    def test_grayscale_input(self):
        a = _rand_img(9)[:, :, 0]
        b = _rand_img(10)[:, :, 0]
        assert abs(ssim(a, b) - _skimage_ssim(a, b)) < 1e-6

    def test_symmetry(self):
        a, b = _rand_img(11), _rand_img(12)
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-9

    def test_too_small(self):
        with pytest.raises(InvalidParameterError):
            ssim(np.zeros((10, 10, 3)), np.zeros((10, 10, 3)))


class TestMiou:
    def test_perfect_prediction(self):
        gt = np.array([[0, 1], [2, 1]])
        per_class, mean = miou(gt, gt, 3)
        assert mean == 1.0
        assert all(v == 1.0 for v in per_class.values())

    def test_half_half_counting(self):
        gt = np.zeros((4, 8), dtype=np.int64)
        gt[:, 4:] = 1
        pred = np.zeros_like(gt)
        per_class, mean = miou(pred, gt, 2)
        assert per_class[0] == 0.5
        assert per_class[1] == 0.0
        assert mean == 0.25

    def test_matches_confusion_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            gt = rng.integers(0, 5, (16, 16))
            pred = rng.integers(0, 5, (16, 16))
            gt[rng.uniform(size=gt.shape) < 0.1] = 255
            pred[rng.uniform(size=pred.shape) < 0.05] = 255
            ours, mean = miou(pred, gt, 5)
            ref, ref_mean = ref_confusion_iou(pred, gt, 5)
            assert ours == pytest.approx(ref)
            assert mean == pytest.approx(ref_mean)

    def test_absent_class_excluded_by_default(self):
        gt = np.zeros((4, 4), dtype=np.int64)
        pred = np.zeros_like(gt)
        per_class, mean = miou(pred, gt, 3)
        assert per_class[1] is None and per_class[2] is None
        assert mean == 1.0

    def test_strict_mode_counts_absent_as_zero(self):
        gt = np.zeros((4, 4), dtype=np.int64)
        pred = np.zeros_like(gt)
        _, mean = miou(pred, gt, 4, strict=True)
        assert mean == 0.25

    @settings(deadline=None, max_examples=25)
    @given(st.integers(0, 10_000), st.permutations(list(range(4))))
    def test_permutation_equivariance(self, seed, perm):
        rng = np.random.default_rng(seed)
        gt = rng.integers(0, 4, (12, 12))
        pred = rng.integers(0, 4, (12, 12))
        perm = np.array(perm)
        base, base_mean = miou(pred, gt, 4)
        relabeled, relabeled_mean = miou(perm[pred], perm[gt], 4)
        assert base_mean == pytest.approx(relabeled_mean)
        for c in range(4):
            a, b = base[c], relabeled[perm[c]]
            assert (a is None and b is None) or a == pytest.approx(b)

    def test_ignored_pixels_not_counted(self):
        gt = np.array([[0, 255], [255, 1]])
        pred = np.array([[0, 1], [0, 1]])
        per_class, mean = miou(pred, gt, 2)
        assert mean == 1.0


class TestEvalReport:
    def test_serializations(self):
        report = EvalReport(
            frame_names=["a.png", "b.png"],
            psnr_values=[30.0, 32.0],
            ssim_values=[0.9, 0.95],
            per_class_iou={0: 0.8, 1: None},
            miou=0.8,
            class_names=["sky", "tree"],
        )
        table = report.to_table()
        assert "a.png" in table and "miou" in table and "absent" in table
        kv = report.to_kv()
        assert "mean.psnr = 31.0" in kv
        assert "iou.1 = absent" in kv
        assert report.mean_psnr == 31.0
