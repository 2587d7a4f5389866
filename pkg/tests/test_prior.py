import numpy as np
import pytest
import torch

from lift3d.errors import NumericError, ValidationError
from lift3d.prior import (
    AnalyticOracleBackend,
    GuidanceConfig,
    PriorBackend,
    cfg_combine,
    clip_d_loss,
    predict_x0,
    sds_pixel_gradient,
    select_prior_loss,
)
from lift3d.schedule import NoiseSchedule


@pytest.fixture(scope="module")
def sched():
    return NoiseSchedule()


def single_gaussian_backend(sched, shape=(8, 8, 3), mean_value=None, var=0.01):
    if mean_value is None:
        rng = np.random.default_rng(42)
        mean = rng.uniform(0.2, 0.8, size=(1, *shape))
    else:
        mean = np.full((1, *shape), mean_value)
    return AnalyticOracleBackend(sched, mean, var)


class TestCfgCombine:
    def test_omega_zero(self):
        c, u = torch.randn(5), torch.randn(5)
        assert torch.equal(cfg_combine(c, u, 0.0), c)

    def test_identical_predictions(self):
        c = torch.randn(5)
        assert torch.allclose(cfg_combine(c, c.clone(), 10.0), c)

    def test_direct_formula(self):
        c = torch.ones(3)
        u = torch.zeros(3)
        assert torch.allclose(cfg_combine(c, u, 10.0), torch.full((3,), 11.0))

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            cfg_combine(torch.ones(3), torch.ones(4), 1.0)


class TestSelectPriorLoss:
    def test_below_threshold_is_clip_d(self):
        cfg = GuidanceConfig()
        assert select_prior_loss(cfg, 399) == "clip_d"

    def test_boundary_is_sds(self):
        cfg = GuidanceConfig()
        assert select_prior_loss(cfg, 400) == "sds"

    def test_threshold_at_min_means_sds_only(self):
        # t_star == t_min: no timestep is below the threshold, SDS always
        cfg = GuidanceConfig(t_min=200, t_star=200, t_max=600)
        for t in (200, 201, 400, 600):
            assert select_prior_loss(cfg, t) == "sds"

    def test_exclusive_routing(self):
        cfg = GuidanceConfig()
        for t in range(cfg.t_min, cfg.t_max + 1):
            assert select_prior_loss(cfg, t) in ("sds", "clip_d")

    def test_invalid_config(self):
        with pytest.raises(ValidationError):
            GuidanceConfig(t_min=300, t_star=200, t_max=600)
        with pytest.raises(ValidationError):
            GuidanceConfig(omega=-1.0)


class TestOraclePredictNoise:
    def test_posterior_mean_single_gaussian(self, sched):
        """Closed-form conjugate check against an independent formula."""
        backend = single_gaussian_backend(sched, shape=(4, 4, 3), var=0.04)
        t = 350
        a, s = sched.alpha(t), sched.sigma(t)
        z_t = torch.from_numpy(np.random.default_rng(3).normal(size=(4, 4, 3)))
        m = backend.means[0].reshape(4, 4, 3)
        c2 = 0.04
        expected = m + (a * c2 / (a * a * c2 + s * s)) * (z_t - a * m)
        post = backend.posterior_mean(z_t, t)
        assert torch.allclose(post, expected, atol=1e-10)

    def test_predict_noise_definition(self, sched):
        backend = single_gaussian_backend(sched)
        t = 500
        z_t = torch.from_numpy(np.random.default_rng(5).normal(size=(8, 8, 3)))
        eps_hat = backend.predict_noise(z_t, None, t)
        expected = (z_t - sched.alpha(t) * backend.posterior_mean(z_t, t)) / sched.sigma(t)
        assert torch.allclose(eps_hat, expected)

    def test_conditioning_selects_component(self, sched):
        rng = np.random.default_rng(0)
        means = rng.uniform(0, 1, size=(3, 4, 4, 3))
        backend = AnalyticOracleBackend(sched, means, 0.01)
        z_t = torch.from_numpy(rng.normal(size=(4, 4, 3)))
        post1 = backend.posterior_mean(z_t, 400, conditioning=1)
        single = AnalyticOracleBackend(sched, means[1:2], 0.01)
        assert torch.allclose(post1, single.posterior_mean(z_t, 400))

    def test_embed_condition_parsing(self, sched):
        backend = AnalyticOracleBackend(
            sched, np.zeros((4, 2, 2, 3)) + np.arange(4)[:, None, None, None], 1.0
        )
        assert backend.embed_condition(2) == 2
        assert backend.embed_condition("component:3") == 3
        assert backend.embed_condition(None) is None
        with pytest.raises(ValidationError):
            backend.embed_condition("a fluffy dog")
        with pytest.raises(ValidationError):
            backend.embed_condition(9)


class TestSdsGradient:
    def test_perfect_critic_gives_zero(self, sched):
        class PerfectBackend(AnalyticOracleBackend):
            def predict_noise(self, z_t, conditioning, t):
                return self._eps

        backend = PerfectBackend(sched, np.zeros((1, 4, 4, 3)), 1.0)
        eps = torch.from_numpy(np.random.default_rng(1).normal(size=(4, 4, 3)))
        backend._eps = eps
        x = torch.rand(4, 4, 3, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
        g = sds_pixel_gradient(backend, sched, x, None, 400, eps, GuidanceConfig())
        assert torch.allclose(g, torch.zeros_like(g))

    def test_descent_direction_toward_mode(self, sched):
        """For a single Gaussian and eps=0 the gradient is a positive
        multiple of (x - m): descent moves x toward the mode."""
        backend = single_gaussian_backend(sched, shape=(4, 4, 3), mean_value=0.7, var=0.0025)
        x = torch.full((4, 4, 3), 0.2, dtype=torch.float64)
        t = 450
        eps = torch.zeros_like(x)
        g = sds_pixel_gradient(backend, sched, x, None, t, eps, GuidanceConfig())
        a, s = sched.alpha(t), sched.sigma(t)
        v = a * a * 0.0025 + s * s
        w = sched.sigma(t) ** 2
        # eps_hat = (sigma / v)(z_t - alpha m) with z_t = alpha x, so the
        # gradient is w * (alpha sigma / v) * (x - m)
        factor = w * (a * s / v)
        expected = factor * (x - 0.7)
        assert torch.allclose(g, expected, rtol=1e-8, atol=1e-12)
        assert ((g * (x - 0.7)) >= 0).all()  # descent moves toward m

    def test_zero_weight_masks_gradient(self, sched):
        backend = single_gaussian_backend(sched)

        class ZeroWeightSchedule(NoiseSchedule):
            def weight(self, t, mode="sigma2"):
                return 0.0

        zw = ZeroWeightSchedule()
        x = torch.rand(8, 8, 3, dtype=torch.float64)
        g = sds_pixel_gradient(
            single_gaussian_backend(zw), zw, x, None, 300, torch.zeros_like(x), GuidanceConfig()
        )
        assert torch.count_nonzero(g) == 0

    def test_linear_in_residual(self, sched):
        """Gradient is linear in (eps_hat - eps) for fixed t."""

        class FixedBackend(PriorBackend):
            def __init__(self, eps_hat):
                self.eps_hat = eps_hat

            def predict_noise(self, z_t, conditioning, t):
                return self.eps_hat

            def encode_image(self, image):
                return image

            def decode_latent(self, latent):
                return latent

            def embed_image(self, image):
                return image.reshape(-1) / torch.linalg.vector_norm(image)

            def embed_condition(self, condition):
                return condition

        rng = np.random.default_rng(11)
        e1 = torch.from_numpy(rng.normal(size=(4, 4, 3)))
        e2 = torch.from_numpy(rng.normal(size=(4, 4, 3)))
        x = torch.rand(4, 4, 3, dtype=torch.float64)
        eps = torch.zeros_like(x)
        cfg = GuidanceConfig(omega=0.0)
        g1 = sds_pixel_gradient(FixedBackend(e1), sched, x, None, 300, eps, cfg)
        g2 = sds_pixel_gradient(FixedBackend(e2), sched, x, None, 300, eps, cfg)
        g12 = sds_pixel_gradient(FixedBackend(e1 + e2), sched, x, None, 300, eps, cfg)
        w = sched.weight(300)
        # g(e1 + e2) + w*eps_correction = g(e1) + g(e2) up to the shared -w*eps term (zero here)
        assert torch.allclose(g12, g1 + g2, atol=1e-12)

    def test_timestep_outside_range_rejected(self, sched):
        backend = single_gaussian_backend(sched)
        x = torch.rand(8, 8, 3)
        with pytest.raises(ValidationError):
            sds_pixel_gradient(backend, sched, x, None, 100, torch.zeros_like(x), GuidanceConfig())


class TestSdsDescentProperty:
    def test_median_distance_decreases(self, sched):
        """Iterated SDS descent on a unimodal oracle contracts toward the
        mode: the median distance over 100 random starts decreases at every
        50-step checkpoint."""
        shape = (8, 8, 3)
        backend = single_gaussian_backend(sched, shape=shape, mean_value=0.6, var=0.0025)
        cfg = GuidanceConfig()
        rng = np.random.default_rng(99)
        xs = torch.from_numpy(rng.uniform(0.0, 1.0, size=(100, *shape)))
        m = 0.6
        lr = 0.05

        def median_distance():
            d = torch.linalg.vector_norm((xs - m).reshape(xs.shape[0], -1), dim=1)
            return float(d.median())

        checkpoints = [median_distance()]
        for step in range(200):
            t = int(rng.integers(cfg.t_min, cfg.t_max + 1))
            eps = torch.from_numpy(rng.standard_normal((xs.shape[0], *shape)))
            for i in range(xs.shape[0]):
                g = sds_pixel_gradient(backend, sched, xs[i], None, t, eps[i], cfg)
                xs[i] = xs[i] - lr * g
            if (step + 1) % 50 == 0:
                checkpoints.append(median_distance())
        assert all(a > b for a, b in zip(checkpoints, checkpoints[1:]))


class TestPredictX0:
    def test_perfect_prediction_inverts_noising(self, sched):
        class EchoBackend(AnalyticOracleBackend):
            def predict_noise(self, z_t, conditioning, t):
                return self._eps

        backend = EchoBackend(sched, np.zeros((1, 4, 4, 3)), 1.0)
        x0 = torch.rand(4, 4, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        eps = torch.from_numpy(np.random.default_rng(1).normal(size=(4, 4, 3)))
        backend._eps = eps
        z_t = sched.add_noise(x0, 300, eps)
        out = predict_x0(backend, sched, z_t, None, 300, omega=0.0)
        assert torch.allclose(out, x0, atol=1e-12)

    def test_single_gaussian_returns_posterior_mean(self, sched):
        backend = single_gaussian_backend(sched, shape=(4, 4, 3), mean_value=0.5, var=0.01)
        z_t = torch.from_numpy(np.random.default_rng(4).normal(size=(4, 4, 3)) * 0.3 + 0.4)
        t = 420
        out = predict_x0(backend, sched, z_t, None, t, omega=0.0)
        expected = backend.posterior_mean(z_t, t).clamp(0, 1)
        assert torch.allclose(out, expected, atol=1e-12)

    def test_tiny_alpha_rejected(self):
        long_sched = NoiseSchedule(t_max=5000)
        t_bad = next(t for t in range(1, 5001) if long_sched.alpha(t) < 1e-4)
        backend = single_gaussian_backend(long_sched, shape=(2, 2, 3))
        with pytest.raises(NumericError):
            predict_x0(backend, long_sched, torch.zeros(2, 2, 3), None, t_bad, 0.0)


class TestClipDLoss:
    def test_identical_images_give_exactly_minus_one(self, sched):
        backend = single_gaussian_backend(sched)
        x = torch.rand(8, 8, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(3))
        loss = clip_d_loss(backend, x, x.clone())
        assert float(loss) == -1.0

    def test_orthogonal_embeddings_give_zero(self, sched):
        backend = single_gaussian_backend(sched)
        a = torch.zeros(8, 8, 3, dtype=torch.float64)
        b = torch.zeros(8, 8, 3, dtype=torch.float64)
        a[0:2, 0:2, 0] = 1.0  # pooled cells are disjoint -> orthogonal embeddings
        b[6:8, 6:8, 1] = 1.0
        loss = clip_d_loss(backend, a, b)
        assert float(loss) == pytest.approx(0.0, abs=1e-12)

    def test_value_range(self, sched):
        backend = single_gaussian_backend(sched)
        rng = np.random.default_rng(8)
        for _ in range(20):
            a = torch.from_numpy(rng.uniform(0, 1, size=(8, 8, 3)))
            b = torch.from_numpy(rng.uniform(0, 1, size=(8, 8, 3)))
            v = float(clip_d_loss(backend, a, b))
            assert -1.0 <= v <= 1.0

    def test_rescaling_invariance(self, sched):
        """Invariant to positive rescaling of pre-normalization embeddings."""
        backend = single_gaussian_backend(sched)
        rng = np.random.default_rng(9)
        a = torch.from_numpy(rng.uniform(0.1, 1, size=(8, 8, 3)))
        b = torch.from_numpy(rng.uniform(0.1, 1, size=(8, 8, 3)))
        v1 = float(clip_d_loss(backend, a, b))
        v2 = float(clip_d_loss(backend, a, b * 3.7))
        assert v1 == pytest.approx(v2, abs=1e-12)

    def test_resolution_mismatch(self, sched):
        backend = single_gaussian_backend(sched)
        with pytest.raises(ValidationError):
            clip_d_loss(backend, torch.rand(8, 8, 3), torch.rand(4, 4, 3))

    def test_gradient_matches_finite_differences(self, sched):
        backend = single_gaussian_backend(sched)
        rng = np.random.default_rng(10)
        x = torch.from_numpy(rng.uniform(0.2, 0.8, size=(8, 8, 3)))
        ref = torch.from_numpy(rng.uniform(0.2, 0.8, size=(8, 8, 3)))
        x_var = x.clone().requires_grad_(True)
        loss = clip_d_loss(backend, ref, x_var)
        loss.backward()
        analytic = x_var.grad
        h = 1e-6
        fd_err = 0.0
        for idx in [(0, 0, 0), (3, 4, 1), (7, 7, 2), (2, 6, 0), (5, 1, 2)]:
            xp = x.clone()
            xm = x.clone()
            xp[idx] += h
            xm[idx] -= h
            fd = (
                float(clip_d_loss(backend, ref, xp)) - float(clip_d_loss(backend, ref, xm))
            ) / (2 * h)
            denom = max(abs(fd), 1e-8)
            fd_err = max(fd_err, abs(fd - float(analytic[idx])) / denom)
        assert fd_err < 1e-3
