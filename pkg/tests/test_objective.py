"""Tests for Adam and the wachter / ours / regularized objectives."""

import numpy as np
import pytest

from cf_utils.errors import OptimizationError
from cf_utils.gaussian import rng_stream
from cf_utils.models import LinearLikelihood, init_classifier, nll
from cf_utils.objective import (
    ObjectiveConfig,
    fidelity,
    make_loss,
    ours_loss,
    regularized_loss,
    wachter_loss,
)
from cf_utils.optim import adam_minimize
from cf_utils.posterior import posterior_pgm1, posterior_pgm2, posterior_pgm3
from cf_utils.prior import DataPrior, build_joint


def _quadratic(c):
    c = np.asarray(c, dtype=float)
    return lambda z: (0.5 * float((z - c) @ (z - c)), z - c)


def _random_instance(seed, n=3, k=2):
    rng = rng_stream(seed)
    s = rng.standard_normal((n, n))
    prior = DataPrior(rng.standard_normal(n), s @ s.T + np.eye(n))
    r = rng.standard_normal((k, k))
    lik = LinearLikelihood(rng.standard_normal((k, n)), rng.standard_normal(k), r @ r.T + 0.5 * np.eye(k))
    return prior, lik, rng.standard_normal(n), rng.standard_normal(k)


def _fd_grad(f, x, step=1e-6):
    g = np.zeros_like(x)
    for j in range(x.shape[0]):
        e = np.zeros_like(x)
        e[j] = step
        g[j] = (f(x + e)[0] - f(x - e)[0]) / (2 * step)
    return g


class TestAdamMinimize:
    def test_convex_quadratic(self):
        z, trace = adam_minimize(_quadratic([1.0, -2.0, 3.0]), np.zeros(3), steps=1000)
        assert np.abs(z - [1.0, -2.0, 3.0]).max() < 1e-3
        assert len(trace) <= 1001

    @pytest.mark.slow
    def test_rosenbrock(self):
        def rosen(z):
            a, b = z
            value = (1 - a) ** 2 + 100 * (b - a * a) ** 2
            grad = np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])
            return value, grad

        z, trace = adam_minimize(rosen, [-1.2, 1.0], steps=5000, lr=0.01)
        assert rosen(z)[0] <= 1e-2
        assert min(trace) == pytest.approx(rosen(z)[0])

    def test_zero_gradient_returns_init(self):
        z, trace = adam_minimize(_quadratic([2.0, 2.0]), [2.0, 2.0], steps=50)
        assert np.array_equal(z, [2.0, 2.0])
        assert len(trace) == 1

    def test_grad_tol_stops_early(self):
        _, trace = adam_minimize(_quadratic([1.0]), [0.0], steps=1000, grad_tol=0.5)
        assert len(trace) < 100

    def test_mask_freezes_coordinates(self):
        z, _ = adam_minimize(_quadratic([1.0, 1.0]), [0.0, 0.0], steps=200, mask=[True, False])
        assert z[0] == 0.0
        assert z[1] == pytest.approx(1.0, abs=1e-2)

    def test_init_is_not_mutated(self):
        init = np.zeros(2)
        adam_minimize(_quadratic([1.0, 1.0]), init, steps=10)
        assert np.array_equal(init, np.zeros(2))

    def test_non_finite_start(self):
        with pytest.raises(OptimizationError):
            adam_minimize(lambda z: (float("nan"), z), [0.0], steps=5)

    def test_init_noise_is_seeded(self):
        f = _quadratic([0.0, 0.0])
        a, _ = adam_minimize(f, [1.0, 1.0], steps=3, seed=4, init_noise=0.1)
        b, _ = adam_minimize(f, [1.0, 1.0], steps=3, seed=4, init_noise=0.1)
        assert np.array_equal(a, b)

    def test_init_noise_needs_seed(self):
        with pytest.raises(ValueError):
            adam_minimize(_quadratic([0.0]), [0.0], init_noise=0.1)


class TestObjectiveConfig:
    def test_alpha_one_rejected(self):
        with pytest.raises(ValueError):
            ObjectiveConfig(alpha=1.0)

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            ObjectiveConfig(variant="sgd")

    def test_negative_gamma(self):
        with pytest.raises(ValueError):
            ObjectiveConfig(gamma=-1.0)

    def test_fidelity_unknown_model(self):
        with pytest.raises(TypeError):
            fidelity(object(), np.zeros(2), 0)


class TestGradients:
    @pytest.mark.parametrize("variant", ["wachter", "ours", "regularized"])
    def test_linear_model_gradients(self, variant):
        prior, lik, x, y = _random_instance(3)
        cfg = ObjectiveConfig(gamma=0.7, alpha=0.4, variant=variant, gamma_reg=0.3, fid_weight=1.5)
        f = make_loss(cfg, x, y, lik, prior)
        z = rng_stream(5).standard_normal(3)
        assert f(z)[1] == pytest.approx(_fd_grad(f, z), rel=1e-5, abs=1e-6)

    def test_classifier_gradients(self):
        clf = init_classifier(2, (4,), 2, seed=3)
        prior = DataPrior(np.zeros(2), np.array([[2.0, 0.4], [0.4, 1.0]]))
        f = make_loss(ObjectiveConfig(gamma=2.0, alpha=0.6), [0.5, -0.5], 1, clf, prior)
        z = np.array([0.1, 0.3])
        assert f(z)[1] == pytest.approx(_fd_grad(f, z), rel=1e-5, abs=1e-6)


class TestWachter:
    def test_gamma_zero_is_pure_nll(self):
        clf = init_classifier(2, (4,), 2, seed=1)
        z = np.array([0.3, -0.2])
        value, _ = wachter_loss(z, np.zeros(2), 1, clf, ObjectiveConfig(gamma=0.0, variant="wachter"))
        assert value == pytest.approx(nll(clf, z, 1))

    def test_large_gamma_pins_to_reference(self):
        clf = init_classifier(2, (4,), 2, seed=1)
        x = np.array([0.5, 0.5])
        f = make_loss(ObjectiveConfig(gamma=1e8, variant="wachter"), x, 0, clf)
        z, _ = adam_minimize(f, x, steps=200)
        assert np.abs(z - x).max() < 1e-4

    def test_minimizer_is_pgm1_mean(self):
        prior, lik, x, y = _random_instance(7)
        gamma = 0.8
        post = posterior_pgm1(lik, x, y, gamma * np.eye(3))
        _, grad = wachter_loss(post.mean, x, y, lik, ObjectiveConfig(gamma=gamma, variant="wachter"))
        assert np.abs(grad).max() < 1e-8


class TestOurs:
    def test_gamma_zero_minimizer_is_shrunk_reference(self):
        prior = DataPrior(np.array([1.0, -1.0]), np.array([[2.0, 0.5], [0.5, 1.0]]))
        x = np.array([3.0, 2.0])
        cfg = ObjectiveConfig(gamma=0.0, alpha=0.3)
        centre = 0.7 * prior.mu + 0.3 * x
        _, grad = ours_loss(centre, x, 0, None, prior, cfg)
        assert np.abs(grad).max() < 1e-10
        z, _ = adam_minimize(make_loss(cfg, x, 0, None, prior), x, steps=1000)
        assert np.abs(z - centre).max() < 1e-3

    def test_alpha_zero_gamma_zero_minimizer_is_mean(self):
        prior = DataPrior(np.array([1.0, -1.0]), np.eye(2))
        _, grad = ours_loss(prior.mu, np.array([5.0, 5.0]), 0, None, prior, ObjectiveConfig(gamma=0.0, alpha=0.0))
        assert np.abs(grad).max() < 1e-12

    @pytest.mark.parametrize("alpha", [0.0, 0.5, 0.9])
    def test_minimizer_is_pgm2_mean_with_rescaled_precision(self, alpha):
        prior, lik, x, y = _random_instance(11)
        gamma = 1.7
        scaled = LinearLikelihood(lik.a, lik.b, gamma * lik.l / (1 - alpha ** 2))
        post = posterior_pgm2(scaled, build_joint(prior, alpha), x, y)
        _, grad = ours_loss(post.mean, x, y, lik, prior, ObjectiveConfig(gamma=gamma, alpha=alpha))
        assert np.abs(grad).max() < 1e-6 * max(1.0, np.abs(post.mean).max())

    def test_adam_reaches_pgm2_mean_across_grid(self):
        prior, lik, x, y = _random_instance(13)
        for alpha in (0.0, 0.3, 0.7, 0.99):
            for gamma in (0.1, 1.0, 10.0):
                scaled = LinearLikelihood(lik.a, lik.b, gamma * lik.l / (1 - alpha ** 2))
                mean = posterior_pgm2(scaled, build_joint(prior, alpha), x, y).mean
                loss = make_loss(ObjectiveConfig(gamma=gamma, alpha=alpha), x, y, lik, prior)
                z, _ = adam_minimize(loss, x, steps=5000, lr=0.05)
                z, _ = adam_minimize(loss, z, steps=5000, lr=0.001)
                assert np.abs(z - mean).max() < 1e-2 * max(1.0, np.abs(mean).max()), (alpha, gamma)

    def test_needs_a_prior(self):
        with pytest.raises(ValueError):
            make_loss(ObjectiveConfig(variant="ours"), [0.0], 0, init_classifier(1, (2,), 2))


class TestRegularized:
    def test_gamma_reg_zero_is_wachter(self):
        prior, lik, x, y = _random_instance(2)
        z = rng_stream(9).standard_normal(3)
        a = regularized_loss(z, x, y, lik, prior, ObjectiveConfig(gamma=0.5, gamma_reg=0.0, variant="regularized"))
        b = wachter_loss(z, x, y, lik, ObjectiveConfig(gamma=0.5, variant="wachter"))
        assert a[0] == pytest.approx(b[0])
        assert a[1] == pytest.approx(b[1])

    def test_only_regularizer_minimizer_is_mean(self):
        prior = DataPrior(np.array([2.0, -3.0]), np.diag([1.0, 4.0]))
        cfg = ObjectiveConfig(gamma=0.0, fid_weight=0.0, variant="regularized")
        _, grad = regularized_loss(prior.mu, np.zeros(2), 0, None, prior, cfg)
        assert np.abs(grad).max() < 1e-12

    def test_one_dimension_converges_to_pgm3_mean(self):
        prior = DataPrior(np.zeros(1), np.eye(1))
        lik = LinearLikelihood([[1.0]], [0.0], [[1.0]])
        cfg = ObjectiveConfig(gamma=1.0, gamma_reg=1.0, fid_weight=1.0, variant="regularized")
        z, _ = adam_minimize(make_loss(cfg, [0.0], [2.0], lik, prior), np.zeros(1))
        assert z[0] == pytest.approx(2 / 3, abs=1e-3)

    def test_diagonal_prior_matches_pgm3(self):
        _, lik, x, y = _random_instance(4)
        prior = DataPrior(np.array([0.5, -1.0, 2.0]), np.diag([1.0, 0.5, 3.0]))
        cfg = ObjectiveConfig(gamma=0.6, gamma_reg=0.4, fid_weight=2.0, variant="regularized")
        scaled = LinearLikelihood(lik.a, lik.b, cfg.fid_weight * lik.l)
        post = posterior_pgm3(scaled, prior, x, y, cfg.gamma * np.eye(3), reg_weight=cfg.gamma_reg)
        _, grad = regularized_loss(post.mean, x, y, lik, prior, cfg)
        assert np.abs(grad).max() < 1e-8

    def test_correlated_prior_departs_from_pgm3(self):
        _, lik, x, y = _random_instance(4)
        prior = DataPrior(np.array([0.5, -1.0, 2.0]), np.array([[1.0, 0.6, 0.0], [0.6, 1.0, 0.3], [0.0, 0.3, 1.0]]))
        cfg = ObjectiveConfig(gamma=0.6, gamma_reg=0.4, fid_weight=2.0, variant="regularized")
        scaled = LinearLikelihood(lik.a, lik.b, cfg.fid_weight * lik.l)
        post = posterior_pgm3(scaled, prior, x, y, cfg.gamma * np.eye(3), reg_weight=cfg.gamma_reg)
        _, grad = regularized_loss(post.mean, x, y, lik, prior, cfg)
        assert np.abs(grad).max() > 1e-6
