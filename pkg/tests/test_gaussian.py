"""Unit tests for the dense Gaussian algebra in cf_utils.gaussian."""

import threading

import numpy as np
import pytest

from cf_utils.errors import ConditioningError, FactorizationError, NotPSDError
from cf_utils.gaussian import (
    Gaussian,
    IndexSet,
    cholesky_psd,
    condition,
    index_set,
    log_pdf,
    mahalanobis_sq,
    marginalize,
    pseudo_inverse,
    rng_stream,
    sample,
)


def _random_psd(rng, d, rank=None):
    a = rng.standard_normal((d, rank or d))
    return a @ a.T + (0.0 if rank else 0.1) * np.eye(d)


class TestCholeskyPsd:
    def test_identity_needs_no_jitter(self):
        L, c = cholesky_psd(np.eye(3), 0.0)
        assert c == 0.0
        assert np.allclose(L, np.eye(3))

    def test_rank_one_boundary_takes_small_jitter(self):
        m = np.array([[4.0, 2.0], [2.0, 1.0]])
        L, c = cholesky_psd(m, 1e-9)
        assert c <= 1e-8
        assert np.allclose(L @ L.T, m + c * np.eye(2), atol=1e-12)

    def test_indefinite_fails(self):
        with pytest.raises(FactorizationError):
            cholesky_psd(np.array([[1.0, 2.0], [2.0, 1.0]]), 1e-9)

    def test_singular_without_jitter_fails(self):
        with pytest.raises(FactorizationError):
            cholesky_psd(np.array([[1.0, 1.0], [1.0, 1.0]]), 0.0)

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError):
            cholesky_psd(np.array([[1.0, 0.5], [0.0, 1.0]]))


class TestIndexSet:
    def test_complement(self):
        assert index_set([0, 2], 4).complement().indices == (1, 3)

    def test_unsorted_rejected(self):
        with pytest.raises(ValueError):
            IndexSet((2, 1), 3)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            index_set([0, 3], 3)


class TestGaussian:
    def test_small_negative_eigenvalue_clamped(self):
        g = Gaussian([0.0, 0.0], [[1.0, 1.0], [1.0, 1.0 - 1e-12]])
        assert g.eigenvalues.min() >= 0.0
        assert g.rank == 1

    def test_not_psd_rejected(self):
        with pytest.raises(NotPSDError):
            Gaussian([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])

    def test_arrays_are_read_only(self):
        g = Gaussian([1.0], [[2.0]])
        with pytest.raises(ValueError):
            g.mean[0] = 3.0

    def test_factor_reconstructs_rank_deficient_cov(self):
        rng = rng_stream(3)
        cov = _random_psd(rng, 5, rank=2)
        g = Gaussian(np.zeros(5), cov)
        f = g.factor
        assert np.allclose(np.tril(f), f)
        assert np.abs(f @ f.T - cov).max() <= 1e-7 * max(1.0, np.abs(cov).max())

    def test_factor_computed_once_across_threads(self):
        g = Gaussian(np.zeros(3), np.diag([1.0, 2.0, 3.0]))
        seen = []
        threads = [threading.Thread(target=lambda: seen.append(id(g.factor))) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(set(seen)) == 1


class TestCondition:
    def test_independent_coordinates(self):
        g = Gaussian(np.zeros(2), np.eye(2))
        c = condition(g, [1], [5.0])
        assert c.mean == pytest.approx([0.0])
        assert c.cov == pytest.approx([[1.0]])

    def test_joint_prior_one_dimension(self):
        g = Gaussian([0.0, 0.0], [[1.0, 0.5], [0.5, 1.0]])
        c = condition(g, [1], [1.0])
        assert c.mean[0] == pytest.approx(0.5)
        assert c.cov[0, 0] == pytest.approx(0.75)

    def test_perfect_correlation_gives_point_mass(self):
        g = Gaussian([0.0, 0.0], np.ones((2, 2)))
        c = condition(g, [1], [2.0])
        assert c.mean[0] == pytest.approx(2.0)
        assert c.cov[0, 0] == pytest.approx(0.0, abs=1e-12)

    def test_inconsistent_zero_variance_direction(self):
        g = Gaussian([0.0, 0.0, 0.0], [[1.0, 0.0, 0.0], [0.0, 1.0, 1.0], [0.0, 1.0, 1.0]])
        with pytest.raises(ConditioningError):
            condition(g, [1, 2], [1.0, 2.0])

    def test_covariance_does_not_depend_on_values(self):
        rng = rng_stream(11)
        g = Gaussian(rng.standard_normal(4), _random_psd(rng, 4))
        a = condition(g, [0, 2], [1.0, -3.0])
        b = condition(g, [0, 2], [10.0, 4.0])
        assert np.array_equal(a.cov, b.cov)

    def test_matches_direct_schur_formula(self):
        rng = rng_stream(5)
        for _ in range(50):
            d = int(rng.integers(2, 7))
            cov = _random_psd(rng, d)
            mu = rng.standard_normal(d)
            obs = sorted(rng.choice(d, size=int(rng.integers(1, d)), replace=False).tolist())
            free = [i for i in range(d) if i not in obs]
            v = rng.standard_normal(len(obs))
            g = condition(Gaussian(mu, cov), obs, v)
            inv = np.linalg.inv(cov[np.ix_(obs, obs)])
            gain = cov[np.ix_(free, obs)] @ inv
            assert np.abs(g.mean - (mu[free] + gain @ (v - mu[obs]))).max() < 1e-8
            assert np.abs(g.cov - (cov[np.ix_(free, free)] - gain @ cov[np.ix_(obs, free)])).max() < 1e-8

    def test_observing_everything_rejected(self):
        with pytest.raises(ValueError):
            condition(Gaussian(np.zeros(2), np.eye(2)), [0, 1], [0.0, 0.0])


class TestMarginalize:
    def test_standard_normal(self):
        g = marginalize(Gaussian(np.zeros(3), np.eye(3)), [0, 2])
        assert g.cov == pytest.approx(np.eye(2))

    def test_diagonal(self):
        g = marginalize(Gaussian([1.0, 2.0, 3.0], np.diag([1.0, 4.0, 9.0])), [1])
        assert g.mean == pytest.approx([2.0])
        assert g.cov == pytest.approx([[4.0]])

    def test_empty_keep_rejected(self):
        with pytest.raises(ValueError):
            marginalize(Gaussian(np.zeros(2), np.eye(2)), [])

    def test_commutes_with_condition(self):
        rng = rng_stream(31)
        for _ in range(1000):
            d = int(rng.integers(2, 7))
            g = Gaussian(rng.standard_normal(d), _random_psd(rng, d))
            obs = sorted(rng.choice(d, size=int(rng.integers(1, d)), replace=False).tolist())
            free = [i for i in range(d) if i not in obs]
            keep = sorted(rng.choice(free, size=int(rng.integers(1, len(free) + 1)), replace=False).tolist())
            v = rng.standard_normal(len(obs))

            a = marginalize(condition(g, obs, v), [free.index(i) for i in keep])
            union = sorted(obs + keep)
            b = condition(marginalize(g, union), [union.index(i) for i in obs], v)
            tol = 1e-8 * max(1.0, float(np.abs(g.cov).max()))
            assert np.abs(a.mean - b.mean).max() < tol
            assert np.abs(a.cov - b.cov).max() < tol

            x = rng.standard_normal(d)
            whole = log_pdf(g, x)
            parts = log_pdf(marginalize(g, obs), x[obs]) + log_pdf(condition(g, obs, x[obs]), x[free])
            assert whole == pytest.approx(parts, abs=1e-6)


class TestSample:
    def test_point_mass(self):
        assert np.array_equal(sample(Gaussian([0.0], [[0.0]]), 4, seed=1), np.zeros((4, 1)))

    def test_same_seed_same_draws(self):
        g = Gaussian([1.0, -1.0], [[2.0, 0.3], [0.3, 1.0]])
        assert np.array_equal(sample(g, 10, seed=9), sample(g, 10, seed=9))

    def test_task_ids_give_independent_streams(self):
        g = Gaussian(np.zeros(2), np.eye(2))
        assert not np.array_equal(sample(g, 5, 9, task_id=0), sample(g, 5, 9, task_id=1))

    @pytest.mark.slow
    def test_moments_converge(self):
        x = sample(Gaussian(np.zeros(2), np.eye(2)), 100_000, seed=2)
        assert np.abs(x.mean(axis=0)).max() < 0.02
        assert np.abs(np.cov(x.T) - np.eye(2)).max() < 0.03


class TestDensities:
    def test_standard_normal_at_origin(self):
        assert log_pdf(Gaussian(np.zeros(2), np.eye(2)), np.zeros(2)) == pytest.approx(-np.log(2 * np.pi))

    def test_batch_matches_single(self):
        g = Gaussian([1.0, 2.0], [[2.0, 0.5], [0.5, 1.0]])
        pts = np.array([[0.0, 0.0], [1.0, 2.0], [3.0, -1.0]])
        batch = log_pdf(g, pts)
        assert batch == pytest.approx([log_pdf(g, p) for p in pts])

    def test_log_pdf_singular_fails(self):
        with pytest.raises(FactorizationError):
            log_pdf(Gaussian(np.zeros(2), np.ones((2, 2))), np.zeros(2))

    def test_mahalanobis_at_mean_is_zero(self):
        g = Gaussian([1.0, 2.0], [[2.0, 0.5], [0.5, 1.0]])
        assert mahalanobis_sq(g, [1.0, 2.0]) == pytest.approx(0.0)

    def test_mahalanobis_euclidean_case(self):
        assert mahalanobis_sq(Gaussian(np.zeros(2), np.eye(2)), [3.0, 4.0]) == pytest.approx(25.0)

    def test_mahalanobis_invariant_under_linear_map(self):
        rng = rng_stream(21)
        for _ in range(20):
            cov = _random_psd(rng, 3)
            mu, x = rng.standard_normal(3), rng.standard_normal(3)
            t = rng.standard_normal((3, 3)) + 3 * np.eye(3)
            a = mahalanobis_sq(Gaussian(mu, cov), x)
            b = mahalanobis_sq(Gaussian(t @ mu, t @ cov @ t.T), t @ x)
            assert a == pytest.approx(b, rel=1e-8)


def test_pseudo_inverse_of_rank_one():
    m = np.array([[4.0, 2.0], [2.0, 1.0]])
    p = pseudo_inverse(m)
    assert np.allclose(m @ p @ m, m)
