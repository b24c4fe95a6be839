import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from visionisp.denoise import (
    DenoiserParams,
    NoiseSpec,
    bilateral_denoise,
    feature_content_loss,
    inject_noise,
    nelder_mead,
    tune_denoiser,
)
from visionisp.detector import BackboneNet
from visionisp.errors import ConfigError, ShapeError
from visionisp.scenes import make_scene_set


@pytest.fixture(scope="module")
def net():
    return BackboneNet.create(np.random.default_rng(0), widths=(8, 8, 8), dtype=np.float64)


@pytest.fixture(scope="module")
def scenes():
    return make_scene_set(3, 4, size=32, grid=4).images.astype(np.float64)


class TestNoise:
    def test_variance(self):
        clean = np.full((1, 1, 256, 256), 0.5)
        noisy = inject_noise(clean, NoiseSpec(0.06, seed=1), clamp=False)
        assert np.var(noisy - clean) == pytest.approx(0.06, abs=0.005)

    def test_clamped_by_default(self):
        noisy = inject_noise(np.full((3, 16, 16), 0.5), NoiseSpec(0.18, seed=2))
        assert noisy.min() >= 0 and noisy.max() <= 1

    def test_zero_variance(self):
        x = np.random.default_rng(0).random((3, 8, 8))
        np.testing.assert_array_equal(inject_noise(x, NoiseSpec(0.0)), x)

    def test_deterministic(self):
        x = np.full((3, 8, 8), 0.3)
        a = inject_noise(x, NoiseSpec(0.12, seed=5), stream=2)
        b = inject_noise(x, NoiseSpec(0.12, seed=5), stream=2)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, inject_noise(x, NoiseSpec(0.12, seed=5), stream=3))


class TestBilateral:
    def test_blend_zero(self):
        x = np.random.default_rng(1).random((3, 9, 9))
        np.testing.assert_array_equal(bilateral_denoise(x, DenoiserParams(1.0, 0.1, 0.0)), x)

    def test_constant(self):
        x = np.full((1, 3, 7, 7), 0.42)
        np.testing.assert_allclose(bilateral_denoise(x, DenoiserParams(2.0, 0.05, 1.0)), 0.42)

    def test_gaussian_limit(self):
        x = np.random.default_rng(2).random((3, 20, 20))
        out = bilateral_denoise(x, DenoiserParams(1.5, 1e6, 1.0))
        ref = np.stack([gaussian_filter(c, 1.5, mode="nearest", truncate=2.0) for c in x])
        np.testing.assert_allclose(out, ref, atol=1e-4)

    def test_edge_preserved(self):
        x = np.zeros((3, 10, 10))
        x[:, :, 5:] = 1.0
        out = bilateral_denoise(x, DenoiserParams(2.0, 0.05, 1.0))
        np.testing.assert_allclose(out, x, atol=1e-6)

    def test_bad_sigma(self):
        with pytest.raises(ConfigError):
            DenoiserParams(0.0, 0.1, 0.5)
        with pytest.raises(ConfigError):
            DenoiserParams(1.0, 0.1, 1.5)


class TestFeatureLoss:
    def test_identical(self, net, scenes):
        assert feature_content_loss(scenes[:1], scenes[:1], net) == 0.0

    def test_symmetric(self, net, scenes):
        a, b = scenes[:1], scenes[1:2]
        assert feature_content_loss(a, b, net) == pytest.approx(feature_content_loss(b, a, net))
        assert feature_content_loss(a, b, net) > 0

    def test_identity_net_is_pixel_sad(self, scenes):
        lin = BackboneNet.create(np.random.default_rng(0), widths=(3, 3, 3), first_stride=1, dtype=np.float64,
                                 offset=0.0)
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        lin.stages[0].weight.data = w
        a, b = scenes[:1], scenes[2:3]
        assert feature_content_loss(a, b, lin, layer_tap=1) == pytest.approx(np.abs(a - b).sum())

    def test_shape_mismatch(self, net, scenes):
        with pytest.raises(ShapeError):
            feature_content_loss(scenes[:1], scenes[:1, :, :16], net)


class TestNelderMead:
    def test_quadratic(self):
        x, f, hist = nelder_mead(lambda v: float(np.sum((v - [1.0, -2.0]) ** 2)), [0.5, 0.5], [-5, -5], [5, 5], 300)
        np.testing.assert_allclose(x, [1.0, -2.0], atol=1e-3)

    def test_bounds_respected(self):
        x, f, hist = nelder_mead(lambda v: float(v[0]), [0.5], [0.2], [1.0], 60)
        assert x[0] == pytest.approx(0.2)
        assert all(0.2 <= h[0][0] <= 1.0 for h in hist)

    @pytest.mark.parametrize("budget", [1, 5, 25])
    def test_budget(self, budget):
        calls = []
        nelder_mead(lambda v: calls.append(1) or float(np.sum(np.sin(5 * v))), [1.0, 1.0, 1.0], [-3] * 3, [3] * 3,
                    budget)
        assert len(calls) <= budget


class TestTune:
    def test_noiseless(self, net, scenes):
        pairs = [(s, s) for s in scenes[:2]]
        report = tune_denoiser(pairs, net, budget=60)
        assert report.best_loss <= 1e-6
        assert report.best_loss <= report.init_loss

    def test_blend_grid_oracle(self, net, scenes):
        noisy = [inject_noise(s, NoiseSpec(0.06, seed=4), stream=i) for i, s in enumerate(scenes[:2])]
        pairs = list(zip(noisy, scenes[:2]))
        init = DenoiserParams(1.0, 0.2, 0.5)
        report = tune_denoiser(pairs, net, init=init, budget=40, fixed=("sigma_spatial", "sigma_range"))
        n = np.stack(noisy)
        grid = []
        for b in np.linspace(0, 1, 50):
            out = bilateral_denoise(n, DenoiserParams(1.0, 0.2, b))
            grid.append(sum(feature_content_loss(out[i:i + 1], scenes[i:i + 1], net) for i in range(2)) / 2)
        assert report.best_loss <= min(grid) + 1e-3
        assert report.best.sigma_spatial == 1.0 and report.best.sigma_range == 0.2

    def test_never_worse_than_init(self, net, scenes):
        noisy = [inject_noise(s, NoiseSpec(0.18, seed=6), stream=i) for i, s in enumerate(scenes[:2])]
        report = tune_denoiser(list(zip(noisy, scenes[:2])), net, budget=20)
        assert report.best_loss <= report.init_loss
        assert report.evaluations <= 20

    def test_deterministic(self, net, scenes):
        noisy = [inject_noise(s, NoiseSpec(0.12, seed=7), stream=i) for i, s in enumerate(scenes[:1])]
        a = tune_denoiser(list(zip(noisy, scenes[:1])), net, budget=20).to_json()
        b = tune_denoiser(list(zip(noisy, scenes[:1])), net, budget=20).to_json()
        assert a == b

    def test_preconditions(self, net, scenes):
        with pytest.raises(ConfigError):
            tune_denoiser([], net)
        with pytest.raises(ConfigError):
            tune_denoiser([(scenes[0], scenes[0])], net, budget=19)
        with pytest.raises(ConfigError):
            tune_denoiser([(scenes[0], scenes[0])], net, fixed=("nope",))
