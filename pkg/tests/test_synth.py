import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mimood import synth as S
from mimood.errors import ConfigError, DimensionError


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def constant_images(values, shape=(3, 4, 4)):
    return np.stack([np.full(shape, v, dtype=np.float64) for v in values])


class TestMixup:
    def test_k1_is_a_permutation(self, rng):
        x = rng.random((6, 3, 4, 4))
        x_mix, w, idx = S.multiple_input_mixup(x, S.MixupConfig(k=1), rng)
        assert sorted(idx[:, 0].tolist()) == list(range(6))
        np.testing.assert_array_equal(w, np.ones((6, 1)))
        np.testing.assert_array_equal(x_mix, x[idx[:, 0]])

    def test_midpoint(self, rng):
        x_mix, _, _ = S.multiple_input_mixup(constant_images([0.0, 1.0]), S.MixupConfig(k=2), rng)
        np.testing.assert_allclose(x_mix, 0.5, rtol=0, atol=1e-15)

    def test_mean_of_five_constants(self, rng):
        x = constant_images([0, 0.25, 0.5, 0.75, 1.0])
        x_mix, _, _ = S.multiple_input_mixup(x, S.MixupConfig(k=5), rng)
        np.testing.assert_allclose(x_mix, 0.5, rtol=0, atol=1e-15)

    def test_k_larger_than_batch(self, rng):
        with pytest.raises(ConfigError, match="k=4"):
            S.multiple_input_mixup(rng.random((3, 1, 1, 2)), S.MixupConfig(k=4), rng)

    def test_sources_are_distinct_and_balanced(self, rng):
        idx = S.mixup_sources(20, 7, rng)
        assert all(len(set(row)) == 7 for row in idx.tolist())
        assert np.bincount(idx.ravel(), minlength=20).tolist() == [7] * 20

    def test_every_ordered_subset_is_reachable(self):
        # rows of the cyclic construction cover all 3! orderings of a 3-batch with k=3
        rng = np.random.default_rng(1)
        seen = {tuple(S.mixup_sources(3, 3, rng)[0]) for _ in range(300)}
        assert len(seen) == 6

    def test_dirichlet_weights(self, rng):
        w = S.mixup_weights(50, S.MixupConfig(k=6, weight_mode="dirichlet", alpha=0.3), rng)
        assert (w >= 0).all()
        np.testing.assert_allclose(w.sum(1), 1.0, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("kw", [{"k": 0}, {"weight_mode": "softmax"}, {"weight_mode": "dirichlet", "alpha": 0}])
    def test_bad_config(self, kw):
        with pytest.raises(ConfigError):
            S.MixupConfig(**kw)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 10), st.sampled_from(["equal", "dirichlet"]))
    def test_convex_hull(self, seed, k, mode):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(k, 16))
        x = rng.random((n, 2, 3, 3))
        x_mix, w, idx = S.multiple_input_mixup(x, S.MixupConfig(k=k, weight_mode=mode, alpha=0.5), rng)
        src = x[idx]
        assert (x_mix >= src.min(1)).all() and (x_mix <= src.max(1)).all()
        np.testing.assert_allclose(w.sum(1), 1.0, rtol=0, atol=1e-12)
        np.testing.assert_allclose(x_mix, np.einsum("nk,nkchw->nchw", w, src), rtol=0, atol=1e-14)


class TestResize:
    def test_same_size_is_identity(self, rng):
        x = rng.random((2, 3, 5, 7))
        np.testing.assert_array_equal(S.resize_bilinear(x, 5, 7), x)

    @pytest.mark.parametrize("hw", [(1, 1), (3, 9), (32, 32), (2, 17)])
    def test_constant_is_preserved(self, hw):
        out = S.resize_bilinear(np.full((1, 3, 4, 6), 0.37), *hw)
        assert out.shape == (1, 3, *hw)
        np.testing.assert_allclose(out, 0.37, rtol=0, atol=1e-15)

    def test_upsample_two_pixels(self):
        out = S.resize_bilinear(np.array([[[[0.0, 1.0]]]]), 1, 4)
        np.testing.assert_allclose(out[0, 0, 0], [0, 0.25, 0.75, 1], rtol=0, atol=1e-15)

    def test_downsample_averages_pairs(self, rng):
        x = rng.random((1, 1, 1, 8))
        out = S.resize_bilinear(x, 1, 4)
        np.testing.assert_allclose(out[0, 0, 0], x[0, 0, 0].reshape(4, 2).mean(1), atol=1e-15)

    def test_bad_size(self):
        with pytest.raises(ConfigError):
            S.resize_bilinear(np.zeros((1, 1, 2, 2)), 0, 2)


class TestJitter:
    def test_identity_factors(self, rng):
        x = rng.random((4, 3, 5, 5))
        out = S.apply_jitter(x, np.ones(4), np.ones(4), np.ones(4), np.zeros(4))
        np.testing.assert_allclose(out, x, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("s,h", [(0.2, 0.0), (1.5, 0.3), (1.0, -0.5), (0.7, 0.1)])
    def test_gray_is_fixed_point(self, rng, s, h):
        x = np.repeat(rng.random((2, 1, 4, 4)), 3, axis=1)
        out = S.apply_jitter(x, [1, 1], [1, 1], [s, s], [h, h])
        np.testing.assert_allclose(out, x, rtol=0, atol=1e-12)

    def test_brightness_scales(self):
        out = S.apply_jitter(np.full((1, 3, 2, 2), 0.8), [0.5], [1], [1], [0])
        np.testing.assert_allclose(out, 0.4, rtol=0, atol=1e-15)

    def test_contrast_zero_gives_mean_gray(self, rng):
        x = rng.random((1, 3, 3, 3))
        out = S.apply_jitter(x, [1], [1e-300], [1], [0])
        np.testing.assert_allclose(out, S.gray(x).mean(), atol=1e-12)

    def test_hue_preserves_luma(self, rng):
        # chroma kept small so no stage clamps
        x = 0.45 + 0.1 * rng.random((3, 3, 4, 4))
        out = S.apply_jitter(x, [1] * 3, [1] * 3, [1] * 3, [0.05, -0.1, 0.1])
        np.testing.assert_allclose(S.gray(out), S.gray(x), atol=1e-12)
        assert np.abs(out - x).max() > 1e-4

    def test_hue_rotations_compose(self):
        np.testing.assert_allclose(S.hue_matrix(1.0), np.eye(3), atol=1e-12)
        np.testing.assert_allclose(S.hue_matrix(0.25) @ S.hue_matrix(0.25), S.hue_matrix(0.5), atol=1e-12)

    def test_single_channel_passes_through(self, rng):
        x = rng.random((2, 1, 1, 2))
        np.testing.assert_array_equal(S.color_jitter(x, S.AugmentConfig(), rng), x)

    def test_two_channels_rejected(self, rng):
        with pytest.raises(DimensionError):
            S.color_jitter(rng.random((1, 2, 3, 3)), S.AugmentConfig(), rng)


class TestAffine:
    def test_identity(self, rng):
        x = rng.random((3, 3, 6, 5))
        np.testing.assert_allclose(S.affine_transform(x, 0.0, 0.0, 0.0), x, rtol=0, atol=1e-12)

    def test_full_width_shift_is_zero(self, rng):
        x = rng.random((2, 3, 6, 5))
        assert not S.affine_transform(x, 0.0, 5.0, 0.0).any()
        assert not S.affine_transform(x, 0.0, 0.0, -6.0).any()

    def test_integer_shift_moves_pixels(self, rng):
        x = rng.random((1, 1, 4, 5))
        out = S.affine_transform(x, 0.0, 2.0, 1.0)
        np.testing.assert_allclose(out[0, 0, 1:, 2:], x[0, 0, :-1, :-2], atol=1e-15)
        assert not out[0, 0, 0].any() and not out[0, 0, :, :2].any()

    def test_quarter_turn_probe(self):
        # a, b / c, d rotated a quarter turn counter-clockwise as displayed: b, d / a, c
        probe = np.array([[[[1.0, 2.0], [3.0, 4.0]]]]) / 4
        out = S.affine_transform(probe, 90.0, 0.0, 0.0)
        np.testing.assert_allclose(out[0, 0], np.array([[2.0, 4.0], [1.0, 3.0]]) / 4, rtol=0, atol=1e-12)
        np.testing.assert_allclose(out[0, 0], np.rot90(probe[0, 0]), rtol=0, atol=1e-12)

    def test_quarter_turn_matches_rot90_on_square(self, rng):
        x = rng.random((2, 3, 5, 5))
        out = S.affine_transform(x, [90.0, -90.0], 0.0, 0.0)
        np.testing.assert_allclose(out[0], np.rot90(x[0], 1, axes=(1, 2)), atol=1e-12)
        np.testing.assert_allclose(out[1], np.rot90(x[1], -1, axes=(1, 2)), atol=1e-12)

    def test_random_affine_zero_range_is_identity(self, rng):
        x = rng.random((4, 3, 5, 5))
        cfg = S.AugmentConfig.identity((5, 5))
        np.testing.assert_allclose(S.random_affine(x, cfg, rng), x, rtol=0, atol=1e-12)

    @pytest.mark.parametrize(
        "kw",
        [{"rotation_degrees": (-100, 0)}, {"translate_frac": (0, 0.3)}, {"hue_range": (0.2, 0.1)}, {"brightness_range": (0, 1)}],
    )
    def test_config_bounds(self, kw):
        with pytest.raises(ConfigError):
            S.AugmentConfig(**kw)


class TestSynthesize:
    def test_identity_augmentation(self, rng):
        x = rng.random((8, 3, 6, 6))
        mb = S.synthesize_ood(x, S.MixupConfig(k=3), S.AugmentConfig.identity((6, 6)), rng)
        np.testing.assert_allclose(mb.x_aug, mb.x_mix, rtol=0, atol=1e-12)

    def test_identity_with_k1_permutes_input(self, rng):
        x = rng.random((8, 3, 6, 6))
        mb = S.synthesize_ood(x, S.MixupConfig(k=1), S.AugmentConfig.identity((6, 6)), rng)
        np.testing.assert_allclose(mb.x_aug, x[mb.source_indices[:, 0]], rtol=0, atol=1e-12)

    def test_deterministic(self):
        x = np.random.default_rng(5).random((6, 3, 8, 8))
        a = S.synthesize_ood(x, S.MixupConfig(k=4), S.AugmentConfig(), np.random.default_rng(9))
        b = S.synthesize_ood(x, S.MixupConfig(k=4), S.AugmentConfig(), np.random.default_rng(9))
        for f in ("x_mix", "x_aug", "weights", "source_indices"):
            assert getattr(a, f).tobytes() == getattr(b, f).tobytes()

    def test_default_rng_comes_from_config_seed(self):
        x = np.random.default_rng(5).random((6, 1, 1, 2))
        cfg = S.MixupConfig(k=2, seed=13)
        a = S.synthesize_ood(x, cfg, S.AugmentConfig.identity((1, 2)))
        b = S.synthesize_ood(x, cfg, S.AugmentConfig.identity((1, 2)))
        assert a.x_aug.tobytes() == b.x_aug.tobytes()

    def test_defaults_resize_and_stay_in_range(self, rng):
        x = rng.random((10, 3, 8, 8))
        mb = S.synthesize_ood(x, S.MixupConfig(k=5), S.AugmentConfig(), rng)
        assert mb.x_mix.shape == (10, 3, 8, 8) and mb.x_aug.shape == (10, 3, 32, 32)
        assert mb.x_aug.min() >= 0 and mb.x_aug.max() <= 1
