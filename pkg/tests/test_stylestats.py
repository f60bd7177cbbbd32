import numpy as np
import pytest

from styledg import tensor as T
from styledg.tensor import Tensor, grad_check
from styledg.stylestats import (
    EPS, SrmIlConfig, StyleStats, adain, channel_stats, gram_matrix,
    instance_norm, srm_il,
)

X_2x2 = np.array([[1.0, 3.0], [5.0, 7.0]])


class TestChannelStats:
    def test_worked_example(self):
        st = channel_stats(X_2x2[None])  # [1,2,2]
        assert st.mean[0] == pytest.approx(4.0)
        assert st.std[0] == pytest.approx(np.sqrt(5.0 + EPS))

    def test_constant_channel(self):
        st = channel_stats(np.full((1, 3, 3), 2.5))
        assert st.mean[0] == pytest.approx(2.5)
        assert st.std[0] == pytest.approx(np.sqrt(EPS))

    def test_zeros(self):
        st = channel_stats(np.zeros((2, 4, 4)))
        assert np.allclose(st.mean, 0.0)
        assert np.allclose(st.std, np.sqrt(EPS))

    def test_batched(self):
        st = channel_stats(np.zeros((2, 3, 4, 4)))
        assert st.mean.shape == (2, 3)

    def test_empty_spatial(self):
        with pytest.raises(ValueError):
            channel_stats(np.zeros((1, 0, 4)))

    def test_stats_invariant(self):
        with pytest.raises(ValueError):
            StyleStats(mean=np.zeros(2), std=np.zeros(2))


class TestInstanceNorm:
    def test_standardizes(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(2.0, 3.0, size=(2, 3, 8, 8)))
        out = instance_norm(x, Tensor.ones((3,)), Tensor.zeros((3,)))
        st = channel_stats(out)
        assert np.all(np.abs(st.mean) < 1e-5)
        assert np.all(np.abs(st.std - 1.0) < 1e-4)

    def test_zero_gamma_gives_constant(self):
        x = Tensor(np.random.default_rng(1).normal(size=(2, 4, 4)))
        out = instance_norm(x, Tensor.zeros((2,)), Tensor.full((2,), 3.5))
        assert np.allclose(out.data, 3.5)

    def test_worked_example(self):
        x = Tensor(X_2x2[None])
        out = instance_norm(x, Tensor.full((1,), 2.0), Tensor.ones((1,)))
        std = np.sqrt(5.0 + EPS)
        expected = 2.0 * (X_2x2 - 4.0) / std + 1.0
        assert np.allclose(out.data[0], expected, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            instance_norm(Tensor.zeros((3, 2, 2)), Tensor.ones((2,)), Tensor.zeros((2,)))

    def test_reconstruction(self):
        # normalizing then undoing with the measured stats recovers x
        rng = np.random.default_rng(2)
        x = rng.normal(1.0, 2.0, size=(3, 6, 6))
        st = channel_stats(x)
        normed = instance_norm(Tensor(x), Tensor.ones((3,)), Tensor.zeros((3,)))
        rebuilt = normed.data * st.std[:, None, None] + st.mean[:, None, None]
        assert np.allclose(rebuilt, x, atol=1e-5)

    def test_gradients(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(1, 2, 3, 3)))
        g = Tensor(rng.normal(size=(2,)))
        b = Tensor(rng.normal(size=(2,)))
        w = Tensor(rng.normal(size=(1, 2, 3, 3)))
        assert grad_check(lambda t: (instance_norm(t, g, b) * w).sum(), x).ok
        assert grad_check(lambda t: (instance_norm(x, t, b) * w).sum(), g).ok
        assert grad_check(lambda t: (instance_norm(x, g, t) * w).sum(), b).ok


class TestAdain:
    def test_identity(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(2, 5, 5)))
        out = adain(x, x)
        assert np.allclose(out.data, x.data, rtol=1e-5, atol=1e-5)

    def test_constant_reference(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(1, 4, 4)))
        ref = Tensor.full((1, 4, 4), 2.0)
        out = adain(x, ref)
        got = channel_stats(out)
        # degenerate reference: mean transfers exactly, spread stays at the eps floor scale
        assert got.mean[0] == pytest.approx(2.0, abs=1e-9)
        assert got.std[0] <= 2.0 * np.sqrt(2.0 * EPS)

    def test_worked_example_stats(self):
        x = Tensor(X_2x2[None])
        ref = Tensor(np.array([[0.0, 2.0], [4.0, 6.0]])[None])
        out = adain(x, ref)
        got, want = channel_stats(out), channel_stats(ref)
        assert got.mean[0] == pytest.approx(3.0, abs=1e-5)
        assert got.std[0] == pytest.approx(want.std[0], rel=1e-5)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            adain(Tensor.zeros((2, 3, 3)), Tensor.zeros((3, 3, 3)))

    def test_different_spatial_extents(self):
        rng = np.random.default_rng(6)
        out = adain(Tensor(rng.normal(size=(2, 4, 4))), Tensor(rng.normal(size=(2, 7, 3))))
        assert out.shape == (2, 4, 4)

    def test_stat_matching_battery(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            c = int(rng.integers(1, 4))
            x = rng.normal(rng.uniform(-2, 2), rng.uniform(0.5, 3.0), size=(c, 6, 6))
            ref = rng.normal(rng.uniform(-2, 2), rng.uniform(0.5, 3.0), size=(c, 5, 5))
            out = adain(Tensor(x), Tensor(ref))
            got, want = channel_stats(out), channel_stats(ref)
            assert np.all(np.abs(got.mean - want.mean) < 1e-5)
            assert np.all(np.abs(got.std - want.std) / want.std < 1e-4)

    def test_style_idempotent(self):
        rng = np.random.default_rng(8)
        a = Tensor(rng.normal(size=(3, 6, 6)))
        b = Tensor(rng.normal(1.0, 2.0, size=(3, 6, 6)))
        once = adain(a, b)
        twice = adain(once, b)
        assert np.allclose(twice.data, once.data, atol=1e-5)

    def test_gradient(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(2, 3, 3)))
        ref = Tensor(rng.normal(size=(2, 4, 4)))
        w = Tensor(rng.normal(size=(2, 3, 3)))
        assert grad_check(lambda t: (adain(t, ref) * w).sum(), x).ok
        assert grad_check(lambda t: (adain(x, t) * w).sum(), ref).ok


class TestGramMatrix:
    def test_worked_example(self):
        # flattened rows [1,0] and [0,1], H*W = 2
        x = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(2, 1, 2))
        g = gram_matrix(x)
        assert np.allclose(g.data, [[0.5, 0.0], [0.0, 0.5]])

    def test_zeros(self):
        assert np.all(gram_matrix(Tensor.zeros((3, 4, 4))).data == 0.0)

    def test_symmetric_psd(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            c = int(rng.integers(1, 9))
            x = Tensor(rng.normal(size=(c, int(rng.integers(1, 5)), int(rng.integers(1, 5)))))
            g = gram_matrix(x).data
            assert np.array_equal(g, g.T)
            assert np.linalg.eigvalsh(g).min() >= -1e-10  # oracle eigensolve

    def test_gradient(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(3, 2, 2)))
        w = Tensor(rng.normal(size=(3, 3)))
        assert grad_check(lambda t: (gram_matrix(t) * w).sum(), x).ok


class TestSrmIl:
    CFG = SrmIlConfig(x_min=0.0, x_max=255.0, sigma_floor=1.0)

    def test_forced_identity(self):
        rng = np.random.default_rng(12)
        img = Tensor(rng.uniform(0, 255, size=(1, 8, 8)))
        st = channel_stats(img)
        out, _ = srm_il(img, self.CFG, mu=float(st.mean[0]), sigma=float(st.std[0]))
        assert np.allclose(out.data, img.data, atol=1e-5)

    def test_forced_unit_stats(self):
        img = Tensor(X_2x2[None])
        out, _ = srm_il(img, self.CFG, mu=0.0, sigma=1.0)
        expected = (X_2x2 - 4.0) / np.sqrt(5.0 + EPS)
        assert np.allclose(out.data[0], expected, atol=1e-12)

    def test_sampled_stats_within_pixel_range(self):
        rng = np.random.default_rng(13)
        img = Tensor(rng.uniform(0, 255, size=(1, 8, 8)))
        for _ in range(200):
            _, st = srm_il(img, self.CFG, rng=rng)
            assert 0.0 <= st.mean[0] <= 255.0
            assert 0.0 <= st.std[0] <= 255.0

    def test_output_matches_sampled_stats(self):
        rng = np.random.default_rng(14)
        for _ in range(100):
            img = Tensor(rng.uniform(0, 255, size=(1, 12, 12)))
            out, st = srm_il(img, self.CFG, rng=rng)
            got = channel_stats(out)
            assert abs(got.mean[0] - st.mean[0]) < 1e-4 * 255
            assert abs(got.std[0] - st.std[0]) < 1e-4 * 255

    def test_preserves_rank_order(self):
        rng = np.random.default_rng(15)
        img = Tensor(rng.uniform(0, 255, size=(1, 6, 6)))
        out, _ = srm_il(img, self.CFG, rng=rng)
        assert np.array_equal(np.argsort(out.data.ravel()), np.argsort(img.data.ravel()))

    def test_flat_image_becomes_sampled_mean(self):
        img = Tensor.full((1, 4, 4), 100.0)
        out, st = srm_il(img, self.CFG, mu=42.0, sigma=10.0)
        assert np.allclose(out.data, 42.0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SrmIlConfig(x_min=10.0, x_max=5.0)
        with pytest.raises(ValueError):
            SrmIlConfig(sigma_floor=0.0)
