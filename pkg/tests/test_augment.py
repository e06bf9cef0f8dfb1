import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ood_tricks.augment import (
    AugmentPolicy,
    MixConfig,
    RandAugConfig,
    SoftLabelPair,
    apply_mix_policy,
    augment_batch,
    center_crop,
    color_jitter,
    cutmix,
    five_crop,
    hflip,
    mixup,
    op_parameter,
    rand_augment,
    resize_bilinear,
    smooth_labels,
    smooth_targets,
    smooth_vector,
)
from ood_tricks.errors import ConfigError, PolicyError
from ood_tricks.rng import make_rng


def onehot_pair(f, c, nf=8, nc=4):
    return SoftLabelPair(np.eye(nf)[f], np.eye(nc)[c])


class TestLabelSmoothing:
    def test_example_n4(self):
        p = smooth_vector(2, 0.1, 4)
        np.testing.assert_allclose(p, [0.1 / 3, 0.1 / 3, 0.9, 0.1 / 3], rtol=0, atol=1e-15)
        np.testing.assert_allclose(p, [0.03333, 0.03333, 0.9, 0.03333], atol=1e-5)

    def test_zero_epsilon_is_onehot(self):
        assert smooth_vector(0, 0.0, 5).tolist() == [1, 0, 0, 0, 0]

    def test_two_classes(self):
        np.testing.assert_allclose(smooth_vector(1, 0.1, 2), [0.1, 0.9], atol=1e-15)

    def test_pair_heads_independent(self):
        pair = smooth_labels(5, 1, 0.1, 8, 4)
        np.testing.assert_allclose(pair.fine[5], 0.9)
        np.testing.assert_allclose(pair.fine[0], 0.1 / 7)
        np.testing.assert_allclose(pair.coarse[0], 0.1 / 3)

    @pytest.mark.parametrize("eps", [-0.1, 1.0])
    def test_bad_epsilon(self, eps):
        with pytest.raises(ConfigError):
            smooth_vector(0, eps, 4)

    def test_bad_label(self):
        with pytest.raises(ConfigError):
            smooth_labels(8, 0, 0.1, 8, 4)

    def test_batched_matches_single(self):
        labels = [3, 0, 7]
        batch = smooth_targets(labels, 0.1, 8)
        for row, y in zip(batch, labels):
            np.testing.assert_array_equal(row, smooth_vector(y, 0.1, 8))


class TestMixup:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.a = rng.uniform(size=(6, 6, 3))
        self.b = rng.uniform(size=(6, 6, 3))
        self.la, self.lb = onehot_pair(0, 0), onehot_pair(1, 1)

    def test_lambda_one_identity(self):
        img, lab = mixup(self.a, self.la, self.b, self.lb, 1.0)
        np.testing.assert_array_equal(img, self.a)
        np.testing.assert_array_equal(lab.fine, self.la.fine)

    def test_convex_labels(self):
        _, lab = mixup(self.a, self.la, self.b, self.lb, 0.4)
        np.testing.assert_allclose(lab.fine[:3], [0.4, 0.6, 0.0], atol=1e-15)

    def test_symmetric_at_half(self):
        i1, l1 = mixup(self.a, self.la, self.b, self.lb, 0.5)
        i2, l2 = mixup(self.b, self.lb, self.a, self.la, 0.5)
        np.testing.assert_array_equal(i1, i2)
        np.testing.assert_array_equal(l1.fine, l2.fine)

    def test_linearity_exact(self):
        img, _ = mixup(self.a, self.la, self.b, self.lb, 0.3)
        np.testing.assert_array_equal(img, 0.3 * self.a + 0.7 * self.b)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            mixup(self.a, self.la, self.b[:5], self.lb, 0.5)


class TestCutmix:
    def setup_method(self):
        self.a = np.zeros((10, 10, 3))
        self.b = np.ones((10, 10, 3))
        self.la, self.lb = onehot_pair(0, 0), onehot_pair(1, 1)

    def test_gamma_one_degenerate(self):
        img, lab, area = cutmix(self.a, self.la, self.b, self.lb, 1.0, make_rng(0))
        assert area == 0
        np.testing.assert_array_equal(img, self.a)
        np.testing.assert_array_equal(lab.fine, self.la.fine)

    def test_gamma_04_unclipped(self):
        # side round(sqrt(0.6) * 10) = 8, centred so the box fits
        img, lab, area = cutmix(self.a, self.la, self.b, self.lb, 0.4, center=(5, 5))
        assert area == pytest.approx(0.64, abs=1e-15)
        assert img[..., 0].sum() == 64
        assert lab.fine[1] == pytest.approx(0.64, abs=1e-15)

    def test_full_cover(self):
        img, lab, area = cutmix(self.a, self.la, self.b, self.lb, 0.0, center=(5, 5))
        assert area == 1.0
        np.testing.assert_array_equal(img, self.b)
        np.testing.assert_array_equal(lab.fine, self.lb.fine)

    def test_clipped_area_matches_pixels(self):
        _, lab, area = cutmix(self.a, self.la, self.b, self.lb, 0.4, center=(0, 9))
        assert area < 0.64
        assert lab.fine[1] == area

    def test_area_equals_pixel_count_random(self):
        rng = make_rng(3)
        for _ in range(50):
            gamma = rng.uniform()
            img, lab, area = cutmix(self.a, self.la, self.b, self.lb, gamma, rng)
            assert area == img[..., 0].sum() / 100
            assert lab.fine[1] == area


class TestMixPolicy:
    def batch(self, n=8):
        rng = make_rng(1)
        imgs = rng.uniform(size=(n, 8, 8, 3))
        fine = smooth_targets(rng.integers(0, 8, n), 0.1, 8)
        coarse = smooth_targets(rng.integers(0, 4, n), 0.1, 4)
        return imgs, fine, coarse

    def test_always_cutmix(self):
        imgs, f, c = self.batch()
        cfg = MixConfig(alternate_prob=1.0)
        for s in range(100):
            assert apply_mix_policy(imgs, f, c, cfg, make_rng(s)).provenance.op == "cutmix"

    def test_alternation_frequency(self):
        imgs, f, c = self.batch(2)
        cfg = MixConfig()
        rng = make_rng(7)
        ops = [apply_mix_policy(imgs, f, c, cfg, rng).provenance.op for _ in range(10_000)]
        frac = ops.count("cutmix") / len(ops)
        assert 0.47 <= frac <= 0.53

    def test_beta_mean(self):
        rng = make_rng(11)
        draws = rng.beta(0.4, 0.4, size=10_000)
        assert abs(draws.mean() - 0.5) <= 0.02

    def test_batch_too_small(self):
        imgs, f, c = self.batch(1)
        with pytest.raises(PolicyError):
            apply_mix_policy(imgs, f, c, MixConfig(), make_rng(0))

    def test_mixup_batch_matches_pairwise(self):
        imgs, f, c = self.batch()
        out = apply_mix_policy(imgs, f, c, MixConfig(alternate_prob=0.0), make_rng(5))
        lam, perm = out.provenance.coefficient, out.provenance.permutation
        for i, j in enumerate(perm):
            img, lab = mixup(imgs[i], SoftLabelPair(f[i], c[i]), imgs[j], SoftLabelPair(f[j], c[j]), lam)
            np.testing.assert_array_equal(out.images[i], img)
            np.testing.assert_array_equal(out.fine[i], lab.fine)

    def test_cutmix_batch_coefficient_is_pixel_area(self):
        imgs = np.zeros((4, 12, 12, 1))
        imgs[1::2] = 1.0
        f = smooth_targets([0, 1, 0, 1], 0.0, 2)
        c = smooth_targets([0, 0, 0, 0], 0.0, 1)
        for s in range(30):
            out = apply_mix_policy(imgs, f, c, MixConfig(alternate_prob=1.0), make_rng(s))
            prov = out.provenance
            for i, j in enumerate(prov.permutation):
                changed = np.mean(out.images[i] != imgs[i]) if imgs[i, 0, 0, 0] != imgs[j, 0, 0, 0] else None
                if changed is not None:
                    assert changed == prov.area

    def test_disabled(self):
        imgs, f, c = self.batch()
        out = apply_mix_policy(imgs, f, c, MixConfig(enabled=False), make_rng(0))
        assert out.provenance.op == "none"
        np.testing.assert_array_equal(out.images, imgs)

    def test_seeded_reproducible(self):
        imgs, f, c = self.batch()
        a = augment_batch(imgs, [0, 1, 2, 3, 4, 5, 6, 7], [0, 1, 2, 3, 0, 1, 2, 3],
                          AugmentPolicy(randaug=RandAugConfig(), label_smoothing=0.1, mix=MixConfig()), 8, 4, make_rng(9))
        b = augment_batch(imgs, [0, 1, 2, 3, 4, 5, 6, 7], [0, 1, 2, 3, 0, 1, 2, 3],
                          AugmentPolicy(randaug=RandAugConfig(), label_smoothing=0.1, mix=MixConfig()), 8, 4, make_rng(9))
        assert a.images.tobytes() == b.images.tobytes()
        assert a.fine.tobytes() == b.fine.tobytes()
        assert a.provenance == b.provenance

    @pytest.mark.parametrize("bad", [dict(beta_alpha=0), dict(alternate_prob=1.5)])
    def test_config_validation(self, bad):
        with pytest.raises(ConfigError):
            MixConfig(**bad)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), eps=st.sampled_from([0.0, 0.1, 0.3]), n=st.integers(2, 6))
def test_label_mass_and_range_property(seed, eps, n):
    rng = make_rng(seed)
    imgs = rng.uniform(size=(n, 8, 8, 3))
    out = augment_batch(imgs, rng.integers(0, 8, n), rng.integers(0, 4, n),
                        AugmentPolicy(randaug=RandAugConfig(), label_smoothing=eps, mix=MixConfig()), 8, 4, rng)
    np.testing.assert_allclose(out.fine.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(out.coarse.sum(axis=1), 1.0, atol=1e-6)
    assert out.images.min() >= 0 and out.images.max() <= 1
    assert 0 <= out.provenance.coefficient <= 1


class TestRandAugment:
    def test_identity_policy(self):
        img = make_rng(0).uniform(size=(8, 8, 3))
        cfg = RandAugConfig(magnitude=0, magnitude_std=0, op_set=("identity",))
        np.testing.assert_array_equal(rand_augment(img, cfg, make_rng(1)), img)

    def test_hflip_twice(self):
        img = make_rng(0).uniform(size=(8, 8, 3))
        cfg = RandAugConfig(op_set=("hflip",), num_ops=2)
        np.testing.assert_array_equal(rand_augment(img, cfg, make_rng(1)), img)

    def test_rotate_magnitude_map(self):
        img = make_rng(0).uniform(size=(16, 16, 3))
        cfg = RandAugConfig(magnitude=9, magnitude_std=0.5, num_ops=1, op_set=("rotate",))
        for s in range(20):
            out, ops = rand_augment(img, cfg, make_rng(s), return_ops=True)
            (name, mag, angle), = ops
            assert name == "rotate"
            assert abs(angle) == pytest.approx(mag / 10 * 30.0)
            assert 0 <= mag <= 10
            assert out.min() >= 0 and out.max() <= 1

    def test_rotate_zero_std_is_nine_tenths(self):
        assert abs(op_parameter("rotate", 9)) == pytest.approx(27.0)

    def test_all_ops_keep_range(self):
        img = make_rng(0).uniform(size=(12, 12, 3))
        for op in RandAugConfig().op_set:
            out = rand_augment(img, RandAugConfig(magnitude=10, op_set=(op,), num_ops=3), make_rng(2))
            assert out.shape == img.shape
            assert out.min() >= 0 and out.max() <= 1

    @pytest.mark.parametrize("bad", [dict(magnitude=11), dict(magnitude_std=-1), dict(num_ops=0),
                                     dict(op_set=("shear",))])
    def test_config_validation(self, bad):
        with pytest.raises(ConfigError):
            RandAugConfig(**bad)


class TestGeometry:
    def test_resize_identity_bits(self):
        img = make_rng(0).uniform(size=(32, 32, 3)).astype(np.float32)
        assert resize_bilinear(img, 32, 32).tobytes() == img.tobytes()

    def test_checkerboard_centroid(self):
        img = np.array([[0.0, 1.0], [1.0, 0.0]])[..., None]
        np.testing.assert_allclose(resize_bilinear(img, 1, 1), [[[0.5]]], atol=1e-15)

    def test_constant_extension(self):
        out = resize_bilinear(np.full((1, 1, 3), 0.37), 5, 5)
        np.testing.assert_array_equal(out, np.full((5, 5, 3), 0.37))

    def test_resize_batch_matches_single(self):
        imgs = make_rng(1).uniform(size=(3, 10, 10, 3))
        batched = resize_bilinear(imgs, 7, 13)
        for i in range(3):
            np.testing.assert_array_equal(batched[i], resize_bilinear(imgs[i], 7, 13))

    def test_downsample_by_two_averages_blocks(self):
        # half-pixel centres of a 2x reduction land between 2x2 blocks
        img = make_rng(2).uniform(size=(8, 8, 1))
        expected = img.reshape(4, 2, 4, 2, 1).mean(axis=(1, 3))
        np.testing.assert_allclose(resize_bilinear(img, 4, 4), expected, atol=1e-14)

    def test_five_crop_offsets(self):
        img = np.arange(64 * 64, dtype=float).reshape(64, 64, 1)
        crops = five_crop(img, 32, 32)
        assert len(crops) == 5
        for crop, (y, x) in zip(crops[:4], [(0, 0), (0, 32), (32, 0), (32, 32)]):
            np.testing.assert_array_equal(crop, img[y:y + 32, x:x + 32])
        np.testing.assert_array_equal(crops[4], img[16:48, 16:48])

    def test_center_crop_too_large(self):
        with pytest.raises(ConfigError):
            center_crop(np.zeros((8, 8, 3)), 9, 8)

    def test_hflip_involution(self):
        img = make_rng(0).uniform(size=(5, 7, 3))
        np.testing.assert_array_equal(hflip(hflip(img)), img)
        np.testing.assert_array_equal(hflip(img)[:, 0], img[:, -1])

    def test_color_jitter_zero_scope(self):
        img = make_rng(0).uniform(size=(8, 8, 3))
        np.testing.assert_array_equal(color_jitter(img, 0.0, make_rng(1)), img)

    def test_color_jitter_range(self):
        img = make_rng(0).uniform(size=(8, 8, 3))
        out = color_jitter(img, 0.4, make_rng(1))
        assert out.min() >= 0 and out.max() <= 1
        assert not np.array_equal(out, img)


@settings(max_examples=200, deadline=None)
@given(h=st.integers(1, 20), w=st.integers(1, 20), gamma=st.floats(0, 1),
       cy=st.integers(0, 19), cx=st.integers(0, 19))
def test_cutmix_area_property(h, w, gamma, cy, cx):
    a, b = np.zeros((h, w, 1)), np.ones((h, w, 1))
    la, lb = onehot_pair(0, 0), onehot_pair(1, 1)
    img, lab, area = cutmix(a, la, b, lb, gamma, center=(min(cy, h - 1), min(cx, w - 1)))
    assert area == img.sum() / (h * w)
    assert lab.fine[1] == area and lab.fine[0] == 1 - area


@settings(max_examples=50, deadline=None)
@given(value=st.floats(0, 1), h=st.integers(1, 12), th=st.integers(1, 24), tw=st.integers(1, 24))
def test_resize_preserves_constants(value, h, th, tw):
    out = resize_bilinear(np.full((h, h + 1, 3), value), th, tw)
    np.testing.assert_allclose(out, value, atol=1e-12)
