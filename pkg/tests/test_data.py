import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bixnas.data import (AugmentPolicy, Sample, augment, augment_batch, class_intensity, confusion,
                         generate_dataset, hflip, load_dataset, make_splits, metrics, rotate,
                         save_dataset, translate, vflip)
from bixnas.errors import DomainError, ShapeError

masks_3 = arrays(np.int64, (6, 7), elements=st.integers(0, 2))
masks_2 = arrays(np.int64, (5, 5), elements=st.integers(0, 1))


def set_metrics(pred, true, k):
    """Oracle from boolean set algebra."""
    p, t = pred == k, true == k
    tp, fp, fn = (p & t).sum(), (p & ~t).sum(), (~p & t).sum()
    tn = (~p & ~t).sum()
    with np.errstate(invalid="ignore"):
        return tp / (tp + fp + fn), 2 * tp / (2 * tp + fp + fn), tp / (tp + fn), tn / (tn + fp)


def disc_sample(H=64, W=64):
    yy, xx = np.mgrid[:H, :W]
    mask = ((yy - 22) ** 2 + (xx - 24) ** 2 <= 12 ** 2).astype(np.int64)
    mask[(yy - 41) ** 2 + (xx - 41) ** 2 <= 10 ** 2] = 2
    image = mask[None].astype(np.float32).repeat(3, axis=0) / 2
    return Sample(image, mask)


class TestGenerator:
    def test_deterministic(self):
        a = generate_dataset(5, 32, 32, seed=4, noise_level=0.2)
        b = generate_dataset(5, 32, 32, seed=4, noise_level=0.2)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.masks, b.masks)
        c = generate_dataset(5, 32, 32, seed=5, noise_level=0.2)
        assert not np.array_equal(a.masks, c.masks)

    def test_sample_depends_only_on_index(self):
        full = generate_dataset(6, 32, 32, seed=1)
        tail = generate_dataset(2, 32, 32, seed=1, start=4)
        np.testing.assert_array_equal(full.images[4:], tail.images)

    def test_splits_are_disjoint_index_ranges(self):
        tr, va = make_splits(3, 2, H=32, W=32, seed=2)
        ref = generate_dataset(5, 32, 32, seed=2)
        np.testing.assert_array_equal(np.concatenate([tr.masks, va.masks]), ref.masks)

    def test_noise_free_levels(self):
        ds = generate_dataset(4, 32, 32, K=4, noise_level=0.0, seed=3)
        for k in range(4):
            sel = ds.masks == k
            if sel.any():
                vals = ds.images.transpose(1, 0, 2, 3)[:, sel]
                np.testing.assert_allclose(vals, class_intensity(k, 4), rtol=1e-6)
        assert len({class_intensity(k, 4) for k in range(4)}) == 4

    def test_value_ranges(self):
        ds = generate_dataset(8, 32, 32, K=3, noise_level=1.0, seed=0)
        assert ds.images.dtype == np.float32
        assert ds.images.min() >= 0 and ds.images.max() <= 1
        assert set(np.unique(ds.masks)) <= {0, 1, 2}

    def test_foreground_band_over_1000_samples(self):
        ds = generate_dataset(1000, noise_level=0.0, seed=11)
        frac = (ds.masks > 0).mean(axis=(1, 2))
        assert frac.min() >= 0.05 and frac.max() <= 0.6

    @pytest.mark.parametrize("kw", [{"K": 1}, {"H": 30, "divisor": 8}, {"noise_level": -1.0}, {"n": -1}])
    def test_rejects(self, kw):
        args = {"n": 1, "H": 32, "W": 32}
        args.update(kw)
        with pytest.raises(DomainError):
            generate_dataset(**args)

    def test_binary_round_trip(self, tmp_path):
        ds = generate_dataset(3, 16, 16, K=3, seed=9, noise_level=0.3)
        back = load_dataset(save_dataset(ds, tmp_path / "d.bin"))
        np.testing.assert_array_equal(back.images, ds.images)
        np.testing.assert_array_equal(back.masks, ds.masks)
        assert (back.num_classes, back.seed, back.noise_level) == (3, 9, 0.3)

    def test_corrupt_file(self, tmp_path):
        p = save_dataset(generate_dataset(1, 16, 16), tmp_path / "d.bin")
        p.write_bytes(p.read_bytes()[:-1])
        with pytest.raises(DomainError):
            load_dataset(p)
        p.write_bytes(b"XXXX" + bytes(60))
        with pytest.raises(DomainError):
            load_dataset(p)


class TestMetrics:
    def test_identical(self):
        m = metrics(np.array([[0, 1], [2, 2]]), np.array([[0, 1], [2, 2]]), 3)
        assert m["IoU"] == m["DICE"] == m["sensitivity"] == m["specificity"] == 1.0

    def test_disjoint(self):
        m = metrics(np.array([[1, 0]]), np.array([[0, 1]]), 2)
        assert m["IoU"] == 0.0 and m["DICE"] == 0.0

    def test_empty_class_excluded(self):
        m = metrics(np.array([[0, 1]]), np.array([[0, 1]]), 3)
        assert m["empty_classes"] == [2] and m["per_class"]["IoU"][2] == 1.0
        assert m["mIoU"] == 1.0

    def test_errors(self):
        with pytest.raises(ShapeError):
            metrics(np.zeros((2, 2), int), np.zeros((2, 3), int), 2)
        with pytest.raises(DomainError):
            metrics(np.full((2, 2), 3), np.zeros((2, 2), int), 3)

    @given(masks_3, masks_3)
    def test_matches_set_oracle(self, pred, true):
        m = metrics(pred, true, 3)
        for k in range(3):
            if not ((pred == k) | (true == k)).any():
                continue
            iou, dice, sens, spec = set_metrics(pred, true, k)
            assert m["per_class"]["IoU"][k] == pytest.approx(iou, abs=1e-12)
            assert m["per_class"]["DICE"][k] == pytest.approx(dice, abs=1e-12)
            if (true == k).any():
                assert m["per_class"]["sensitivity"][k] == pytest.approx(sens, abs=1e-12)
            if (true != k).any():
                assert m["per_class"]["specificity"][k] == pytest.approx(spec, abs=1e-12)

    @given(masks_2, masks_2)
    def test_binary_dice_iou_identity(self, pred, true):
        m = metrics(pred, true, 2)
        iou = m["per_class"]["IoU"][1]
        assert abs(m["per_class"]["DICE"][1] - 2 * iou / (1 + iou)) < 1e-12

    @given(masks_3, masks_3)
    def test_bounds(self, pred, true):
        m = metrics(pred, true, 3)
        for name in ("IoU", "DICE", "sensitivity", "specificity"):
            assert all(0.0 <= v <= 1.0 for v in m["per_class"][name])
        assert all(i <= d + 1e-15 for i, d in zip(m["per_class"]["IoU"], m["per_class"]["DICE"]))
        assert confusion(pred, true, 3).sum() == pred.size


class TestAugment:
    def test_identity_policy(self, rng):
        s = disc_sample()
        out = augment(s, AugmentPolicy(), rng)
        np.testing.assert_array_equal(out.image, s.image)
        np.testing.assert_array_equal(out.mask, s.mask)

    def test_flips_are_involutions(self):
        s = disc_sample()
        for f in (hflip, vflip):
            back = f(f(s))
            np.testing.assert_array_equal(back.image, s.image)
            np.testing.assert_array_equal(back.mask, s.mask)

    @given(st.floats(-30, 30))
    def test_rotation_preserves_class_counts(self, deg):
        s = disc_sample()
        out = rotate(s, deg)
        for k in (1, 2):
            before, after = (s.mask == k).sum(), (out.mask == k).sum()
            assert abs(after - before) <= 0.02 * before

    def test_mask_follows_image(self, rng):
        s = disc_sample()
        policy = AugmentPolicy(rotate_deg=20, translate_frac=0.1, hflip=0.5, vflip=0.5)
        for _ in range(5):
            out = augment(s, policy, rng)
            assert set(np.unique(out.mask)) <= set(np.unique(s.mask))
            # the image was painted as mask / 2, so nearest-neighbour agreement should be near total
            agree = (np.round(out.image[0] * 2) == out.mask).mean()
            assert agree > 0.97

    def test_translate_exact_shift(self):
        s = disc_sample()
        out = translate(s, 3, -2)
        np.testing.assert_array_equal(out.mask[10:50, 10:50], s.mask[7:47, 12:52])

    def test_batch_deterministic(self):
        ds = generate_dataset(4, 32, 32, seed=0)
        policy = AugmentPolicy(rotate_deg=15, hflip=0.5)
        a = augment_batch(ds.images, ds.masks, policy, np.random.default_rng(5))
        b = augment_batch(ds.images, ds.masks, policy, np.random.default_rng(5))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])
